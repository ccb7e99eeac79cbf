"""Policy interface and the scripted potential-field expert."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .world import (
    CRUISE_ALTITUDE,
    DEFAULT_LIMITS,
    UAV_RADIUS,
    ActionLimits,
    DepthImage,
    UavState,
    Vec3,
    VelocityAction,
    camera_rays,
    wrap_angle,
)


@dataclass(frozen=True)
class Detection:
    """A confident target sighting: bearing relative to heading and range."""

    bearing: float
    range: float


@dataclass(frozen=True)
class PolicyInput:
    depth: DepthImage
    state: UavState
    instruction: str
    goal_hint: float | None = None
    # Point goal for point-to-point collection agents; None for language-only policies.
    goal_position: Vec3 | None = None
    detection: Detection | None = None

    def __post_init__(self):
        if not self.instruction or not self.instruction.strip():
            raise ValueError("instruction must be non-empty")
        if self.goal_hint is not None:
            if not math.isfinite(self.goal_hint):
                raise ValueError("goal_hint must be finite")
            object.__setattr__(self, "goal_hint", wrap_angle(self.goal_hint))


@dataclass(frozen=True)
class PolicyOutput:
    action: VelocityAction
    aux: dict = field(default_factory=dict)


@runtime_checkable
class Policy(Protocol):
    def act(self, inp: PolicyInput) -> PolicyOutput: ...

    def reset(self) -> None: ...


@dataclass(frozen=True)
class ExpertConfig:
    limits: ActionLimits = DEFAULT_LIMITS
    cruise_altitude: float = CRUISE_ALTITUDE
    k_attract: float = 1.5
    k_repulse: float = 0.6
    k_altitude: float = 1.0
    influence: float = 3.0  # m, repulsive term vanishes beyond this range
    corridor_half_width: float = UAV_RADIUS + 0.6
    clear_distance: float = 7.0  # a heading is free when its corridor is open this far
    stop_distance: float = 1.0
    slow_distance: float = 5.0
    terminal_range: float = 8.0
    min_speed_factor: float = 0.2


class ScriptedExpert:
    """Two-term steering law: pursue the goal bearing, push away from near depth.

    The attractive term steers toward the goal bearing, or toward the free
    heading closest to it when the corridor along the goal bearing is blocked
    in the depth image. The repulsive term turns away from pixels closer than
    ``influence``. Near the target (visible and within ``terminal_range``) the
    expert aligns its heading with the detected target. Without a point goal
    it holds the course line given by ``goal_hint`` from its first pose.
    """

    def __init__(self, config: ExpertConfig = ExpertConfig()):
        self.config = config
        self._origin: tuple[float, float] | None = None
        self._side = 0.0

    def reset(self) -> None:
        self._origin = None
        self._side = 0.0

    def _goal_bearing(self, inp: PolicyInput) -> float | None:
        p = inp.state.position
        if self._origin is None:
            self._origin = (p.x, p.y)
        if inp.goal_position is not None:
            g = inp.goal_position
            return math.atan2(g.y - p.y, g.x - p.x)
        if inp.goal_hint is None:
            return None
        # carrot 10 m ahead along the hinted course line
        ox, oy = self._origin
        ux, uy = math.cos(inp.goal_hint), math.sin(inp.goal_hint)
        along = (p.x - ox) * ux + (p.y - oy) * uy
        cx, cy = ox + (along + 10.0) * ux, oy + (along + 10.0) * uy
        return math.atan2(cy - p.y, cx - p.x)

    def _free_distances(self, depth: DepthImage, headings: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Corridor free length along each heading, from the above-horizon depth columns."""
        cam = camera_rays(depth.width, depth.height, depth.hfov).reshape(depth.height, depth.width, 3)
        rows = slice(0, max(1, depth.height // 2))  # level camera: these rows never see the ground
        col = depth.ranges[rows].astype(np.float64).min(axis=0)
        beta = np.arctan2(cam[0, :, 1], cam[0, :, 0])
        px, py = col * np.cos(beta), col * np.sin(beta)
        hc, hs = np.cos(headings)[:, None], np.sin(headings)[:, None]
        fwd = px[None, :] * hc + py[None, :] * hs
        lat = -px[None, :] * hs + py[None, :] * hc
        blocking = (np.abs(lat) < self.config.corridor_half_width) & (fwd > 0) & (col[None, :] < depth.max_range)
        free = np.where(blocking, fwd, depth.max_range).min(axis=1)
        return free, col, beta

    def act(self, inp: PolicyInput) -> PolicyOutput:
        c = self.config
        st = inp.state
        bearing = self._goal_bearing(inp)
        err = wrap_angle(bearing - st.yaw) if bearing is not None else 0.0
        terminal = inp.detection is not None and inp.detection.range < c.terminal_range
        if terminal:
            err = inp.detection.bearing

        d = inp.depth
        half = math.radians(d.hfov) / 2.0
        headings = np.linspace(-half, half, 2 * d.width + 1)
        free, col, beta = self._free_distances(d, np.append(headings, [0.0, min(max(err, -half), half)]))
        front, free_goal = float(free[-2]), float(free[-1])
        free = free[:-2]

        if terminal or free_goal >= c.clear_distance:
            aim = err
            self._side = 0.0
        else:
            ok = free >= c.clear_distance
            if ok.any():
                cand = headings[ok]
                aim = float(cand[np.argmin(np.abs(cand - err))])
                self._side = 0.0
            else:
                if self._side == 0.0:
                    left = float(free[headings > 0].max())
                    right = float(free[headings < 0].max())
                    if abs(left - right) < 0.5:
                        self._side = 1.0 if err >= 0 else -1.0
                    else:
                        self._side = 1.0 if left > right else -1.0
                aim = self._side * math.pi / 2

        near = np.maximum(0.0, 1.0 / np.maximum(col, 1e-3) - 1.0 / c.influence)
        repulse = 0.0 if terminal else -c.k_repulse * float(np.sum(np.sign(beta) * near))
        yaw_rate = c.k_attract * aim + repulse

        speed = 1.0 if terminal else min(max((front - c.stop_distance) / (c.slow_distance - c.stop_distance), 0.0), 1.0)
        heading_factor = min(max(math.cos(aim), c.min_speed_factor), 1.0)
        v_fwd = c.limits.v_forward * speed * heading_factor
        v_z = c.k_altitude * (c.cruise_altitude - st.position.z)
        action = VelocityAction(v_fwd, yaw_rate, v_z).clamped(c.limits)
        return PolicyOutput(action, {"front_clearance": front, "terminal": terminal})


def scripted_expert(config: ExpertConfig | None = None) -> ScriptedExpert:
    return ScriptedExpert(config or ExpertConfig())


def load_policy(spec: str, scene=None) -> Policy:
    """Build a policy from a spec string.

    ``expert`` -> scripted expert; ``sac:PATH`` -> SAC checkpoint, where PATH
    may be a directory holding one ``<scene id>.saca`` file per scene.
    """
    if spec == "expert":
        return scripted_expert()
    if spec.startswith("sac:"):
        from pathlib import Path

        from .sac import SacPolicy, load_checkpoint

        path = Path(spec[4:])
        if path.is_dir():
            if scene is None:
                raise ValueError("a checkpoint directory needs a scene to pick the agent")
            path = path / f"{scene.id}.saca"
        return SacPolicy(load_checkpoint(path))
    raise ValueError(f"unknown policy spec {spec!r}")
