"""Phase segmentation, imbalance measurement and stratified importance resampling.

Each trajectory splits into an obstacle-avoidance prefix and a target-seeking
suffix that starts at the first step where the goal is visible. Resampling
draws whole phase segments, n_k = round(w_k |D_k|) of them per phase.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# Figure quoted for the example corpus P_0 = (0.73, 0.27). Evaluating the KL
# formula on that P_0 gives ~0.110 nats; both numbers go into reports.
STATED_KL_NATS = 0.36


class PhaseLabel(enum.IntEnum):
    AVOIDANCE = 1
    SEEKING = 2


K = len(PhaseLabel)


class PhaseAbsentError(ValueError):
    pass


@dataclass(frozen=True)
class PhaseSegmentation:
    traj_id: str | None
    length: int
    segments: tuple  # ((start, end), PhaseLabel), ranges partition [0, length)

    def labels(self) -> list[PhaseLabel]:
        out = []
        for (a, b), lab in self.segments:
            out.extend([lab] * (b - a))
        return out


def segment(traj) -> PhaseSegmentation:
    """Split at the first visible step; detection is sticky once it happens.

    Accepts a TrajectoryRecord, a sequence of visibility flags, or an existing
    segmentation (returned unchanged).
    """
    if isinstance(traj, PhaseSegmentation):
        return traj
    if hasattr(traj, "steps"):
        flags, tid = [s.target_visible for s in traj.steps], traj.id
    else:
        flags, tid = list(traj), None
    n = len(flags)
    first = next((i for i, v in enumerate(flags) if v), n)
    segs = []
    if first > 0:
        segs.append(((0, first), PhaseLabel.AVOIDANCE))
    if first < n:
        segs.append(((first, n), PhaseLabel.SEEKING))
    return PhaseSegmentation(tid, n, tuple(segs))


@dataclass(frozen=True)
class PhaseDistribution:
    p: tuple
    total_steps: tuple = ()

    def __post_init__(self):
        p = tuple(float(x) for x in self.p)
        if len(p) < 1 or any(x < 0 or not math.isfinite(x) for x in p):
            raise ValueError(f"invalid phase probabilities {p}")
        if abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"phase probabilities sum to {math.fsum(p)}, not 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "total_steps", tuple(int(x) for x in self.total_steps))

    def as_array(self) -> np.ndarray:
        return np.array(self.p)


def _as_p(p) -> np.ndarray:
    return np.asarray(p.p if isinstance(p, PhaseDistribution) else p, dtype=np.float64)


def phase_distribution(dataset) -> PhaseDistribution:
    """Step-weighted phase fractions over a dataset of trajectories."""
    segs = [segment(t) for t in dataset]
    if not segs:
        raise ValueError("phase_distribution needs at least one trajectory")
    counts = [0] * K
    for s in segs:
        for (a, b), lab in s.segments:
            counts[lab - 1] += b - a
    total = sum(counts)
    if total == 0:
        raise ValueError("dataset holds no steps")
    p = [c / total for c in counts]
    # division can leave the sum one ulp off; absorb it in the largest entry
    j = int(np.argmax(p))
    p[j] = 1.0 - math.fsum(p[:j] + p[j + 1:])
    return PhaseDistribution(tuple(p), tuple(counts))


def kl_from_uniform(p, k: int | None = None) -> float:
    """D_KL(p || Uniform(k)) = sum_k p_k log(k p_k) in nats, with 0 log 0 = 0."""
    arr = _as_p(p)
    k = k or arr.size
    return math.fsum(float(x) * math.log(k * float(x)) for x in arr if x > 0)


def target_distribution(p0, alpha) -> PhaseDistribution:
    """P_target(k) = alpha_k P_0(k) + (1 - alpha_k) / K.

    ``alpha`` is a scalar or one value per phase. Heterogeneous values can
    break normalization; the result is then renormalized with a warning.
    """
    p = _as_p(p0)
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), p.shape)
    if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    k = p.size
    t = a * p + (1.0 - a) / k
    s = math.fsum(t)
    if abs(s - 1.0) > 1e-12:
        warnings.warn(f"per-phase alpha gives a target summing to {s:.6f}; renormalizing", RuntimeWarning,
                      stacklevel=2)
        t = t / s
    t = list(t)
    j = int(np.argmax(t))
    t[j] = 1.0 - math.fsum(t[:j] + t[j + 1:])
    return PhaseDistribution(tuple(t))


def resample_weights(p0, p_target) -> np.ndarray:
    """w_k = P_target(k) / P_0(k)."""
    p, q = _as_p(p0), _as_p(p_target)
    w = np.zeros_like(p)
    for k in range(p.size):
        if p[k] > 0:
            w[k] = q[k] / p[k]
        elif q[k] > 0:
            raise PhaseAbsentError(f"phase {k + 1} is absent from the data but has target mass {q[k]}")
    return w


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SubTrajectory:
    """A phase segment with a provenance link to its source trajectory."""

    traj_index: int
    traj_id: str | None
    phase: PhaseLabel
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


def phase_pools(dataset) -> dict[PhaseLabel, list[SubTrajectory]]:
    """Group the dataset's phase segments into per-phase pools D_k."""
    pools = {lab: [] for lab in PhaseLabel}
    for i, t in enumerate(dataset):
        s = segment(t)
        for (a, b), lab in s.segments:
            pools[lab].append(SubTrajectory(i, s.traj_id, lab, a, b))
    return pools


@dataclass(frozen=True)
class RebalancePlan:
    alpha: tuple
    p0: PhaseDistribution
    p_target: PhaseDistribution
    weights: tuple
    pool_sizes: tuple
    counts: tuple

    def to_dict(self) -> dict:
        return {
            "alpha": list(self.alpha),
            "P0": list(self.p0.p),
            "P0_steps": list(self.p0.total_steps),
            "KL_nats": kl_from_uniform(self.p0),
            "KL_stated_for_reference_corpus_nats": STATED_KL_NATS,
            "KL_reference_corpus_formula_nats": kl_from_uniform((0.73, 0.27)),
            "P_target": list(self.p_target.p),
            "weights": list(self.weights),
            "pool_sizes": list(self.pool_sizes),
            "counts": list(self.counts),
        }


def make_plan(dataset, alpha=0.0, drop_absent: bool = False) -> RebalancePlan:
    """Build the resampling plan for ``dataset``.

    A phase with no steps makes its weight undefined and raises
    PhaseAbsentError, unless ``drop_absent`` is set: the target is then built
    over the present phases only and the absent phase gets weight 0.
    """
    p0 = phase_distribution(dataset)
    pools = phase_pools(dataset)
    present = [k for k, x in enumerate(p0.p) if x > 0]
    if drop_absent and len(present) < K:
        warnings.warn(f"phases {[k + 1 for k in range(K) if k not in present]} absent; "
                      "rebalancing over the present phases only", RuntimeWarning, stacklevel=2)
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (K,))
        sub = target_distribution([p0.p[k] for k in present], a[present])
        full = [0.0] * K
        for k, v in zip(present, sub.p):
            full[k] = v
        pt = PhaseDistribution(tuple(full))
    else:
        pt = target_distribution(p0, alpha)
    w = resample_weights(p0, pt)
    sizes = tuple(len(pools[lab]) for lab in PhaseLabel)
    counts = tuple(round_half_up(float(wk) * n) for wk, n in zip(w, sizes))
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (K,))
    return RebalancePlan(tuple(float(x) for x in a), p0, pt, tuple(float(x) for x in w), sizes, counts)


@dataclass
class RebalancedDataset:
    plan: RebalancePlan
    pools: dict = field(default_factory=dict)  # PhaseLabel -> list[SubTrajectory]

    def samples(self) -> list[SubTrajectory]:
        return [s for lab in PhaseLabel for s in self.pools[lab]]

    def phase_distribution(self) -> PhaseDistribution:
        steps = [sum(s.length for s in self.pools[lab]) for lab in PhaseLabel]
        total = sum(steps)
        p = [x / total for x in steps]
        j = int(np.argmax(p))
        p[j] = 1.0 - math.fsum(p[:j] + p[j + 1:])
        return PhaseDistribution(tuple(p), tuple(steps))


def stratified_resample(pools: dict, plan: RebalancePlan, rng: np.random.Generator) -> RebalancedDataset:
    """Draw exactly n_k segments from each pool: with replacement iff w_k > 1."""
    out = {}
    for k, lab in enumerate(PhaseLabel):
        src = pools[lab]
        n, w = plan.counts[k], plan.weights[k]
        if n == 0:
            out[lab] = []
            continue
        if w > 1.0:
            idx = rng.integers(0, len(src), n)
        else:
            assert n <= len(src), "w_k <= 1 cannot ask for more segments than the pool holds"
            idx = rng.permutation(len(src))[:n]
        out[lab] = [src[int(i)] for i in idx]
    return RebalancedDataset(plan, out)


@dataclass(frozen=True)
class ImportanceCheck:
    raw_mean: float
    reweighted_mean: float
    abs_diff: float
    std_error: float | None = None

    def to_dict(self) -> dict:
        return {"raw_mean": self.raw_mean, "reweighted_mean": self.reweighted_mean, "abs_diff": self.abs_diff,
                "std_error": self.std_error}


def reweighted_mean(rebalanced: RebalancedDataset, f) -> float:
    """Self-normalized mean of f over the resampled set with weight 1/w_k per sample."""
    num, den = [], []
    for k, lab in enumerate(PhaseLabel):
        w = rebalanced.plan.weights[k]
        for s in rebalanced.pools[lab]:
            num.append(f(s) / w)
            den.append(1.0 / w)
    return math.fsum(num) / math.fsum(den)


def importance_check(pools: dict, rebalanced: RebalancedDataset, f, n_boot: int = 0,
                     rng: np.random.Generator | None = None) -> ImportanceCheck:
    """Compare the raw mean of f over all segments with the reweighted resampled mean.

    With ``n_boot`` > 0 the standard error of the resampling estimator is
    estimated by repeating the stratified draw ``n_boot`` times.
    """
    vals = [f(s) for lab in PhaseLabel for s in pools[lab]]
    if not vals:
        raise ValueError("importance_check needs a non-empty dataset")
    raw = math.fsum(vals) / len(vals)
    rw = reweighted_mean(rebalanced, f)
    se = None
    if n_boot > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        reps = [reweighted_mean(stratified_resample(pools, rebalanced.plan, rng), f) for _ in range(n_boot)]
        se = float(np.std(reps, ddof=1))
    return ImportanceCheck(raw, rw, abs(rw - raw), se)


def segment_length(s: SubTrajectory) -> float:
    return float(s.length)


def slice_records(dataset, rebalanced: RebalancedDataset) -> list:
    """Materialize resampled segments as trajectory records (steps keep their source t)."""
    from .dataset import TrajectoryRecord

    out = []
    for n, s in enumerate(rebalanced.samples()):
        src = dataset[s.traj_index]
        out.append(TrajectoryRecord(
            f"{src.id}/{s.phase.name.lower()}/{s.start}-{s.end}/{n}", src.scene_id, src.instruction,
            src.goal_target_id, src.steps[s.start:s.end], src.outcome, src.source))
    return out
