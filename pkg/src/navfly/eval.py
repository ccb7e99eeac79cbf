"""Episode execution, SR/CR/PER metrics and the seen/unseen split harness."""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .instructions import make_instruction
from .planner import UnreachableError, optimal_path_length
from .policy import Detection, Policy, PolicyInput, load_policy
from .world import (
    DEFAULT_DEPTH_H,
    DEFAULT_DEPTH_W,
    DEFAULT_LIMITS,
    UAV_RADIUS,
    ActionLimits,
    DepthImage,
    Scene,
    TargetInstance,
    UavState,
    VelocityAction,
    check_collision,
    render_depth,
    sample_start,
    step,
    target_pool,
    target_visible,
    wrap_angle,
)

log = logging.getLogger(__name__)

TERMINATIONS = ("success", "collision", "timeout")
ABORTED = "aborted"


@dataclass(frozen=True)
class EpisodeLimits:
    max_steps: int = 300
    dt: float = 0.2
    d_tau: float = 5.0
    theta_tau_deg: float = 15.0
    d_col: float = 0.0
    uav_radius: float = UAV_RADIUS
    bounds_margin: float = 5.0
    depth_w: int = DEFAULT_DEPTH_W
    depth_h: int = DEFAULT_DEPTH_H
    action_limits: ActionLimits = DEFAULT_LIMITS


@dataclass(frozen=True)
class EpisodeOutcome:
    final_distance: float
    alignment: float  # rad, in [0, pi]
    min_obstacle_clearance: float
    path_length: float
    optimal_length: float
    steps: int
    termination: str
    condition: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeOutcome":
        return cls(**d)


@dataclass(frozen=True)
class Thresholds:
    d_tau: float = 5.0
    theta_tau_deg: float = 15.0
    d_col: float = 0.0
    count_timeouts: bool = True


def is_success(outcome: EpisodeOutcome, d_tau: float = 5.0, theta_tau: float = math.radians(15.0)) -> bool:
    """Both thresholds are closed (<=); a collided episode never succeeds."""
    return (
        outcome.final_distance <= d_tau
        and outcome.alignment <= theta_tau
        and outcome.termination != "collision"
    )


def alignment_angle(state: UavState, motion_yaw: float, target_xy) -> float:
    dx, dy = target_xy[0] - state.position.x, target_xy[1] - state.position.y
    if dx == 0.0 and dy == 0.0:
        return 0.0
    return abs(wrap_angle(math.atan2(dy, dx) - motion_yaw))


class Episode:
    """Single rollout state machine shared by in-process and networked runners.

    Call :meth:`observe` to get the policy input for the current tick, then
    :meth:`apply` with the chosen action; ``done`` flips once a terminal
    condition (collision, success, timeout) is reached.
    """

    def __init__(self, scene: Scene, goal: TargetInstance, start: UavState, instruction: str,
                 limits: EpisodeLimits = EpisodeLimits(), give_goal_position: bool = True,
                 record: bool = False):
        self.scene = scene
        self.goal = goal
        self.start = start
        self.state = start
        self.instruction = instruction
        self.limits = limits
        g = goal.position
        self.goal_hint = math.atan2(g.y - start.position.y, g.x - start.position.x)
        self.give_goal_position = give_goal_position
        self.steps = 0
        self.path_length = 0.0
        self.min_clearance = check_collision(scene, start, limits.uav_radius, limits.d_col).min_obstacle_distance
        self.alignment = alignment_angle(start, start.yaw, (g.x, g.y))
        self.termination: str | None = None
        self.record = record
        self.trace: list[tuple[UavState, VelocityAction, DepthImage, bool]] = []
        self._last_obs: tuple[DepthImage, bool] | None = None

    @property
    def done(self) -> bool:
        return self.termination is not None

    def observation(self) -> tuple[DepthImage, Detection | None, bool]:
        lim = self.limits
        depth = render_depth(self.scene, self.state, lim.depth_w, lim.depth_h)
        vis = target_visible(self.scene, self.state, self.goal)
        det = Detection(vis.bearing, vis.range) if vis.visible else None
        self._last_obs = (depth, vis.visible)
        return depth, det, vis.visible

    def observe(self) -> PolicyInput:
        depth, det, _ = self.observation()
        return PolicyInput(
            depth=depth,
            state=self.state,
            instruction=self.instruction,
            goal_hint=self.goal_hint,
            goal_position=self.goal.position if self.give_goal_position else None,
            detection=det,
        )

    def apply(self, action: VelocityAction) -> str | None:
        if self.done:
            raise RuntimeError("episode already terminated")
        lim = self.limits
        a = action.clamped(lim.action_limits)
        if self.record:
            if self._last_obs is None:
                self.observation()
            depth, visible = self._last_obs
            self.trace.append((self.state, a, depth, visible))
        self._last_obs = None
        prev = self.state
        self.state = step(prev, a, lim.dt, lim.action_limits)
        self.steps += 1
        self.path_length += prev.position.distance_to(self.state.position)
        col = check_collision(self.scene, self.state, lim.uav_radius, lim.d_col)
        self.min_clearance = min(self.min_clearance, col.min_obstacle_distance)
        motion_yaw = prev.yaw if a.v_forward > 0 else (prev.yaw + math.pi if a.v_forward < 0 else self.state.yaw)
        g = self.goal.position
        self.alignment = alignment_angle(self.state, motion_yaw, (g.x, g.y))
        dist = self.state.position.planar_distance_to(g)
        L, m = self.scene.side_length, lim.bounds_margin
        p = self.state.position
        if col.collided:
            self.termination = "collision"
        elif dist <= lim.d_tau and self.alignment <= math.radians(lim.theta_tau_deg):
            self.termination = "success"
        elif self.steps >= lim.max_steps or not (-m <= p.x <= L + m and -m <= p.y <= L + m):
            self.termination = "timeout"
        return self.termination

    def abort(self) -> None:
        self.termination = ABORTED

    def outcome(self, condition: str | None = None) -> EpisodeOutcome:
        g = self.goal.position
        try:
            l_opt = max(0.0, optimal_path_length(self.scene, self.start.position, g, self.limits.uav_radius)
                        - self.limits.d_tau)
        except UnreachableError:
            l_opt = float("nan")
        return EpisodeOutcome(
            final_distance=self.state.position.planar_distance_to(g),
            alignment=self.alignment,
            min_obstacle_clearance=self.min_clearance,
            path_length=self.path_length,
            optimal_length=l_opt,
            steps=self.steps,
            termination=self.termination or "timeout",
            condition=condition,
        )


def run_episode(scene: Scene, policy: Policy, goal: TargetInstance | None = None,
                limits: EpisodeLimits = EpisodeLimits(), start: UavState | None = None,
                seed: int | None = 0, instruction: str | None = None, condition: str | None = None,
                trace: list | None = None) -> EpisodeOutcome:
    """Roll ``policy`` until success, collision or timeout.

    A policy exception yields an outcome tagged ``aborted``. When ``trace`` is
    given, the applied actions are appended to it.
    """
    goal = goal or scene.goal
    rng = np.random.default_rng(seed)
    if start is None:
        start = sample_start(scene, rng)
    if instruction is None:
        instruction = make_instruction(rng, goal, scene)
    ep = Episode(scene, goal, start, instruction, limits)
    if hasattr(policy, "reset"):
        policy.reset()
    while not ep.done:
        try:
            action = policy.act(ep.observe()).action
        except Exception as exc:  # noqa: BLE001 - any policy failure aborts the episode
            log.warning("policy failure, aborting episode: %s", exc)
            ep.abort()
            break
        if trace is not None:
            trace.append(action.clamped(limits.action_limits))
        ep.apply(action)
    return ep.outcome(condition)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    N: int
    SR: float | None
    CR: float | None
    PER: float | None
    n_success: int
    n_collision: int
    n_timeout: int
    n_aborted: int
    literal: dict = field(default_factory=dict)
    conditions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditions"] = {k: v.to_dict() if isinstance(v, MetricsReport) else v for k, v in self.conditions.items()}
        return d


def _efficiency(o: EpisodeOutcome) -> float:
    denom = max(o.path_length, o.optimal_length)
    if denom <= 0.0:
        return 1.0
    return o.optimal_length / denom


def _aggregate(outcomes, th: Thresholds) -> MetricsReport:
    theta = math.radians(th.theta_tau_deg)
    aborted = [o for o in outcomes if o.termination == ABORTED]
    pool = [o for o in outcomes if o.termination != ABORTED]
    if not th.count_timeouts:
        pool = [o for o in pool if o.termination != "timeout"]
    n = len(pool)
    S = [o for o in pool if is_success(o, th.d_tau, theta)]
    C = [o for o in pool if o.min_obstacle_clearance <= th.d_col]
    S_lit = [o for o in pool if o.final_distance <= th.d_tau and o.alignment <= theta]
    per = math.fsum(_efficiency(o) for o in S) / len(S) if S else None
    per_lit = math.fsum(_efficiency(o) for o in S_lit) / len(S_lit) if S_lit else None
    kinds = Counter(o.termination for o in pool)
    return MetricsReport(
        N=n,
        SR=len(S) / n if n else None,
        CR=len(C) / n if n else None,
        PER=per,
        n_success=len(S),
        n_collision=len(C),
        n_timeout=kinds.get("timeout", 0),
        n_aborted=len(aborted),
        literal={"SR": len(S_lit) / n if n else None, "PER": per_lit, "n_success": len(S_lit)},
    )


def compute_metrics(outcomes, thresholds: Thresholds = Thresholds()) -> MetricsReport:
    """SR = |S|/N, CR = |C|/N, PER = mean efficiency ratio over S.

    PER is None when no episode succeeds. Aborted outcomes are excluded from N
    and counted separately.
    """
    outcomes = list(outcomes)
    report = _aggregate(outcomes, thresholds)
    if report.n_aborted:
        log.warning("%d aborted episodes excluded from N", report.n_aborted)
    if report.N < 1:
        raise ValueError("compute_metrics needs at least one non-aborted outcome")
    conds = sorted({o.condition for o in outcomes if o.condition is not None})
    for c in conds:
        report.conditions[c] = _aggregate([o for o in outcomes if o.condition == c], thresholds)
    return report


# ---------------------------------------------------------------------------
# split harness
# ---------------------------------------------------------------------------

CONDITIONS = (
    ("seen_scene", "seen_target"),
    ("seen_scene", "unseen_target"),
    ("unseen_scene", "seen_target"),
    ("unseen_scene", "unseen_target"),
)


@dataclass
class SplitConfig:
    seen_scenes: list
    unseen_scenes: list
    policy: str = "expert"
    trials: int = 30
    seed: int = 0
    limits: EpisodeLimits = EpisodeLimits()
    thresholds: Thresholds = Thresholds()
    jobs: int = 1


def scene_with_goal(scene: Scene, inst: tuple[int, str, bool]) -> Scene:
    """Relabel the scene's goal slot with pool instance ``inst`` (id, label, seen)."""
    gid, label, seen = inst
    goal = scene.goal
    new_goal = TargetInstance(gid, label, goal.position, goal.footprint_radius, seen)
    others = [t for t in scene.targets if t.id != scene.goal_id and t.id != gid]
    return scene.with_targets([new_goal] + others, gid)


def _trial(args) -> EpisodeOutcome:
    scene, cond_name, policy_spec, seed, limits = args
    policy = load_policy(policy_spec, scene=scene)
    return run_episode(scene, policy, scene.goal, limits, seed=seed, condition=cond_name)


def _plan_trials(cfg: SplitConfig):
    jobs = []
    for ci, (scene_tag, target_tag) in enumerate(CONDITIONS):
        pool = cfg.seen_scenes if scene_tag == "seen_scene" else cfg.unseen_scenes
        if not pool:
            raise ValueError(f"empty scene pool for condition {scene_tag}")
        targets = target_pool(seen=(target_tag == "seen_target"))
        for k in range(cfg.trials):
            rng = np.random.default_rng((cfg.seed, ci, k))
            inst = targets[int(rng.integers(len(targets)))]
            scene = scene_with_goal(pool[k % len(pool)], inst)
            seed = int(rng.integers(2**31))
            jobs.append((scene, f"{scene_tag}/{target_tag}", cfg.policy, seed, cfg.limits))
    return jobs


def run_split_evaluation(cfg: SplitConfig) -> dict:
    """Run the 2x2 seen/unseen grid and return a Table-2-shaped report dict."""
    jobs = _plan_trials(cfg)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            outcomes = list(ex.map(_trial, jobs, chunksize=4))
    else:
        outcomes = [_trial(j) for j in jobs]
    return split_report(outcomes, cfg.thresholds, cfg)


def split_report(outcomes, thresholds: Thresholds, cfg: SplitConfig | None = None) -> dict:
    overall = compute_metrics(outcomes, thresholds)
    marg = {}
    for tag in ("seen_scene", "unseen_scene", "seen_target", "unseen_target"):
        sel = [o for o in outcomes if tag in o.condition.split("/")]
        marg[tag] = _row(compute_metrics([replace(o, condition=None) for o in sel], thresholds))
    return {
        "schema": 1,
        "policy": cfg.policy if cfg else None,
        "trials_per_condition": cfg.trials if cfg else None,
        "seed": cfg.seed if cfg else None,
        "thresholds": asdict(thresholds),
        "conditions": {c: _row(r) for c, r in overall.conditions.items()},
        "marginals": marg,
        "overall": _row(overall),
        "outcomes": [o.to_dict() for o in outcomes],
    }


def _row(r: MetricsReport) -> dict:
    return {
        "N": r.N, "SR": r.SR, "CR": r.CR, "PER": r.PER,
        "n_success": r.n_success, "n_collision": r.n_collision,
        "n_timeout": r.n_timeout, "n_aborted": r.n_aborted,
        "literal": r.literal,
    }


def report_csv(report: dict) -> str:
    lines = ["condition,N,SR,CR,PER"]
    rows = list(report["conditions"].items()) + list(report["marginals"].items()) + [("overall", report["overall"])]
    for name, r in rows:
        vals = ["" if r[k] is None else f"{r[k]:.6f}" for k in ("SR", "CR", "PER")]
        lines.append(",".join([name, str(r["N"])] + vals))
    return "\n".join(lines) + "\n"
