"""Independent reference implementations used as test oracles."""

import math

from navfly.eval import EpisodeOutcome


def brute_force_metrics(outcomes, d_tau=5.0, theta_deg=15.0, d_col=0.0):
    """Second implementation: explicit loops, no shared helpers."""
    N = s = c = 0
    ratios = []
    for o in outcomes:
        if o.termination == "aborted":
            continue
        N += 1
        if o.min_obstacle_clearance <= d_col:
            c += 1
        hit = o.final_distance <= d_tau and o.alignment <= theta_deg * math.pi / 180.0
        if hit and o.termination != "collision":
            s += 1
            big = o.path_length if o.path_length > o.optimal_length else o.optimal_length
            ratios.append(1.0 if big == 0 else o.optimal_length / big)
    per = sum(ratios) / len(ratios) if ratios else None
    return N, s / N, c / N, per


def random_outcomes(rng, n):
    outs = []
    for _ in range(n):
        term = rng.choice(["success", "collision", "timeout", "aborted"], p=[0.5, 0.2, 0.25, 0.05])
        d = float(rng.choice([rng.uniform(0, 10), 5.0]))
        th = float(rng.choice([rng.uniform(0, math.pi), math.radians(15.0)]))
        clear = float(rng.choice([rng.uniform(-1, 5), 0.0]))
        L = float(rng.choice([rng.uniform(0, 100), 0.0]))
        Lo = float(rng.choice([rng.uniform(0, 100), 0.0, L]))
        outs.append(EpisodeOutcome(d, th, clear, L, Lo, int(rng.integers(1, 300)), str(term)))
    return outs
