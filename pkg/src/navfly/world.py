"""Procedural 2.5D navigation scenes, 3-DoF UAV kinematics and geometric sensing.

Obstacles are vertical prisms standing on flat ground (capped cylinders and
axis-aligned boxes). Targets are non-colliding markers placed in a band along
the scene boundary. All queries are pure functions of their inputs; a
``Scene`` is immutable once built and can be shared between episode runners.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

SCHEMA_VERSION = 1

MAX_RANGE = 50.0
MIN_RANGE = 1e-3
DEFAULT_HFOV_DEG = 90.0
DEFAULT_DEPTH_W = 32
DEFAULT_DEPTH_H = 24
ALTITUDE_MIN = 0.5
ALTITUDE_MAX = 10.0
CRUISE_ALTITUDE = 2.0
UAV_RADIUS = 0.3
DETECTION_RANGE = 25.0
TARGET_HEIGHT = 0.8


class SceneConstructionError(RuntimeError):
    """Scene placement failed after the retry budget was exhausted."""


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"non-finite Vec3 component: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def distance_to(self, other: "Vec3") -> float:
        return math.sqrt((self.x - other.x) ** 2 + (self.y - other.y) ** 2 + (self.z - other.z) ** 2)

    def planar_distance_to(self, other: "Vec3") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class Cylinder:
    """Solid vertical cylinder; ``center`` is the centre of its base disc."""

    center: Vec3
    radius: float
    height: float

    def __post_init__(self):
        if not self.radius > 0 or not self.height > 0:
            raise ValueError("cylinder radius and height must be positive")

    kind = "cylinder"

    def to_dict(self) -> dict:
        c = self.center
        return {"kind": "cylinder", "center": [c.x, c.y, c.z], "radius": self.radius, "height": self.height}


@dataclass(frozen=True)
class AxisBox:
    min: Vec3
    max: Vec3

    def __post_init__(self):
        if not (self.min.x < self.max.x and self.min.y < self.max.y and self.min.z < self.max.z):
            raise ValueError("AxisBox requires min < max componentwise")

    kind = "box"

    def to_dict(self) -> dict:
        a, b = self.min, self.max
        return {"kind": "box", "min": [a.x, a.y, a.z], "max": [b.x, b.y, b.z]}


Obstacle = Cylinder | AxisBox


def obstacle_from_dict(d: dict) -> Obstacle:
    if d["kind"] == "cylinder":
        return Cylinder(Vec3(*d["center"]), float(d["radius"]), float(d["height"]))
    if d["kind"] == "box":
        return AxisBox(Vec3(*d["min"]), Vec3(*d["max"]))
    raise ValueError(f"unknown obstacle kind {d['kind']!r}")


@dataclass(frozen=True)
class TargetInstance:
    id: int
    label: str
    position: Vec3
    footprint_radius: float
    seen_flag: bool

    def __post_init__(self):
        if not self.footprint_radius > 0:
            raise ValueError("footprint_radius must be positive")

    def to_dict(self) -> dict:
        p = self.position
        return {
            "id": self.id,
            "label": self.label,
            "position": [p.x, p.y, p.z],
            "footprint_radius": self.footprint_radius,
            "seen_flag": self.seen_flag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TargetInstance":
        return cls(int(d["id"]), d["label"], Vec3(*d["position"]), float(d["footprint_radius"]), bool(d["seen_flag"]))


@dataclass(frozen=True)
class SpawnZone:
    """Axis-aligned rectangle inside the boundary band opposite the goal.

    ``inward_yaw`` points from that boundary edge into the scene.
    """

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    inward_yaw: float

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def to_dict(self) -> dict:
        return {"xmin": self.xmin, "xmax": self.xmax, "ymin": self.ymin, "ymax": self.ymax, "inward_yaw": self.inward_yaw}


@dataclass(frozen=True)
class UavState:
    position: Vec3
    yaw: float
    clock: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.yaw):
            raise ValueError("yaw must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class ActionLimits:
    v_forward: float = 3.0
    yaw_rate: float = 1.5
    v_vertical: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array([self.v_forward, self.yaw_rate, self.v_vertical])


DEFAULT_LIMITS = ActionLimits()


def _f32(v: float) -> float:
    return float(np.float32(v))


@dataclass(frozen=True)
class VelocityAction:
    """Body-frame velocity command.

    Components are stored float32-exact so that an action survives the
    downlink encoding bit for bit.
    """

    v_forward: float = 0.0
    yaw_rate: float = 0.0
    v_vertical: float = 0.0

    def __post_init__(self):
        for name in ("v_forward", "yaw_rate", "v_vertical"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"non-finite action component {name}={v}")
            object.__setattr__(self, name, _f32(v))

    def clamped(self, limits: ActionLimits = DEFAULT_LIMITS) -> "VelocityAction":
        return VelocityAction(
            min(max(self.v_forward, -limits.v_forward), limits.v_forward),
            min(max(self.yaw_rate, -limits.yaw_rate), limits.yaw_rate),
            min(max(self.v_vertical, -limits.v_vertical), limits.v_vertical),
        )

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.v_forward, self.yaw_rate, self.v_vertical)


@dataclass(frozen=True, eq=False)
class DepthImage:
    width: int
    height: int
    ranges: np.ndarray  # float32, shape (height, width), row 0 at the top
    hfov: float = DEFAULT_HFOV_DEG
    max_range: float = MAX_RANGE

    def __post_init__(self):
        r = np.asarray(self.ranges, dtype=np.float32).reshape(self.height, self.width)
        r.setflags(write=False)
        object.__setattr__(self, "ranges", r)

    def __eq__(self, other):
        if not isinstance(other, DepthImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.hfov == other.hfov
            and self.max_range == other.max_range
            and np.array_equal(self.ranges, other.ranges)
        )

    def __hash__(self):
        return hash((self.width, self.height, self.hfov, self.ranges.tobytes()))


@dataclass(frozen=True)
class CollisionQuery:
    collided: bool
    min_obstacle_distance: float


@dataclass(frozen=True)
class VisibilityQuery:
    visible: bool
    bearing: float
    range: float


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    id: str
    side_length: float
    obstacles: tuple
    targets: tuple
    goal_id: int
    spawn_zone: SpawnZone
    rng_seed: int
    seen: bool = True

    @property
    def goal(self) -> TargetInstance:
        for t in self.targets:
            if t.id == self.goal_id:
                return t
        raise KeyError(f"goal {self.goal_id} not among scene targets")

    def target(self, target_id: int) -> TargetInstance:
        for t in self.targets:
            if t.id == target_id:
                return t
        raise KeyError(f"target {target_id} not in scene {self.id}")

    @cached_property
    def _geometry(self) -> "_Geometry":
        return _Geometry.build(self.obstacles)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "id": self.id,
            "side_length": self.side_length,
            "rng_seed": self.rng_seed,
            "seen": self.seen,
            "goal_id": self.goal_id,
            "spawn_zone": self.spawn_zone.to_dict(),
            "obstacles": [o.to_dict() for o in self.obstacles],
            "targets": [t.to_dict() for t in self.targets],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema {d.get('schema')!r}")
        return cls(
            id=d["id"],
            side_length=float(d["side_length"]),
            obstacles=tuple(obstacle_from_dict(o) for o in d["obstacles"]),
            targets=tuple(TargetInstance.from_dict(t) for t in d["targets"]),
            goal_id=int(d["goal_id"]),
            spawn_zone=SpawnZone(**d["spawn_zone"]),
            rng_seed=int(d["rng_seed"]),
            seen=bool(d.get("seen", True)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def with_targets(self, targets, goal_id: int) -> "Scene":
        return Scene(self.id, self.side_length, self.obstacles, tuple(targets), goal_id,
                     self.spawn_zone, self.rng_seed, self.seen)


# Target pool: 50 seen + 10 unseen instances across vehicles, furniture, animals.
_COLORS = ["red", "black", "gray", "white", "blue", "green", "yellow", "orange", "brown", "silver"]
_NOUNS = [
    "sports car", "pickup truck", "bus", "motorcycle", "bicycle",
    "chair", "sofa", "table", "bench", "lamp",
    "dog", "horse", "cow", "deer", "bear",
]


def _build_target_labels() -> list[str]:
    labels = []
    # six nouns per color; noun offset rotates so every noun appears four times
    for ci, color in enumerate(_COLORS):
        for k in range(6):
            labels.append(f"{color} {_NOUNS[(ci * 3 + k) % len(_NOUNS)]}")
    assert len(set(labels)) == 60
    return labels


TARGET_LABELS: tuple[str, ...] = tuple(_build_target_labels())
N_SEEN_TARGETS = 50


def target_pool(seen: bool | None = None) -> list[tuple[int, str, bool]]:
    """(id, label, seen_flag) for the fixed instance pool, optionally filtered."""
    pool = [(i, lab, i < N_SEEN_TARGETS) for i, lab in enumerate(TARGET_LABELS)]
    if seen is None:
        return pool
    return [p for p in pool if p[2] == seen]


@dataclass(frozen=True)
class SceneParams:
    side_length: float = 70.0
    n_obstacles: tuple[int, int] = (4, 12)
    n_distractors: tuple[int, int] = (3, 5)
    cylinder_fraction: float = 0.5
    cylinder_radius: tuple[float, float] = (0.8, 2.5)
    box_size: tuple[float, float] = (2.0, 6.0)
    obstacle_height: tuple[float, float] = (11.0, 20.0)
    interior_margin: float = 12.0
    spawn_band: float = 5.0
    target_inset: tuple[float, float] = (1.5, 3.5)
    min_target_separation: float = 6.0
    min_obstacle_gap: float = 1.0
    seen_targets: bool = True
    max_retries: int = 500

    @classmethod
    def easy(cls, **kw) -> "SceneParams":
        kw.setdefault("n_obstacles", (2, 4))
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene params: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def _edge_point(edge: int, along: float, inset: float, side: float) -> tuple[float, float]:
    # edges: 0 south (y=0), 1 east (x=L), 2 north (y=L), 3 west (x=0)
    if edge == 0:
        return along, inset
    if edge == 1:
        return side - inset, along
    if edge == 2:
        return along, side - inset
    return inset, along


_INWARD_YAW = {0: math.pi / 2, 1: math.pi, 2: -math.pi / 2, 3: 0.0}


def _spawn_zone(edge: int, params: SceneParams) -> SpawnZone:
    L, b = params.side_length, params.spawn_band
    lo, hi = 5.0, L - 5.0
    yaw = _INWARD_YAW[edge]
    if edge == 0:
        return SpawnZone(lo, hi, 0.0, b, yaw)
    if edge == 1:
        return SpawnZone(L - b, L, lo, hi, yaw)
    if edge == 2:
        return SpawnZone(lo, hi, L - b, L, yaw)
    return SpawnZone(0.0, b, lo, hi, yaw)


def _footprint_gap(a: Obstacle, b: Obstacle) -> float:
    """Planar separation between two footprints (<= 0 means overlap)."""
    if isinstance(a, Cylinder) and isinstance(b, Cylinder):
        return math.hypot(a.center.x - b.center.x, a.center.y - b.center.y) - a.radius - b.radius
    if isinstance(a, AxisBox) and isinstance(b, AxisBox):
        dx = max(a.min.x - b.max.x, b.min.x - a.max.x)
        dy = max(a.min.y - b.max.y, b.min.y - a.max.y)
        if dx > 0 and dy > 0:
            return math.hypot(dx, dy)
        return max(dx, dy)
    cyl, box = (a, b) if isinstance(a, Cylinder) else (b, a)
    dx = max(box.min.x - cyl.center.x, 0.0, cyl.center.x - box.max.x)
    dy = max(box.min.y - cyl.center.y, 0.0, cyl.center.y - box.max.y)
    return math.hypot(dx, dy) - cyl.radius


def _footprint_bounds(o: Obstacle) -> tuple[float, float, float, float]:
    if isinstance(o, Cylinder):
        c, r = o.center, o.radius
        return c.x - r, c.y - r, c.x + r, c.y + r
    return o.min.x, o.min.y, o.max.x, o.max.y


def generate_scene(seed: int, params: SceneParams = SceneParams(), scene_id: str | None = None,
                   seen: bool = True) -> Scene:
    """Build a scene deterministically from ``seed``.

    Raises SceneConstructionError naming the constraint that could not be met.
    """
    from .planner import is_reachable  # planner depends on this module

    rng = np.random.default_rng(seed)
    L = params.side_length
    lo_t, hi_t = params.target_inset

    goal_edge = int(rng.integers(4))
    spawn_edge = (goal_edge + 2) % 4
    pool = target_pool(params.seen_targets)
    n_dis = int(rng.integers(params.n_distractors[0], params.n_distractors[1] + 1))
    picks = rng.choice(len(TARGET_LABELS), size=1 + n_dis, replace=False)
    goal_pick = pool[int(rng.integers(len(pool)))]
    others = [p for p in picks if p != goal_pick[0]][:n_dis]

    gx, gy = _edge_point(goal_edge, float(rng.uniform(10.0, L - 10.0)), float(rng.uniform(lo_t, hi_t)), L)
    targets = [TargetInstance(goal_pick[0], goal_pick[1], Vec3(gx, gy, TARGET_HEIGHT), 1.0, goal_pick[2])]
    edges_for_distractors = [e for e in range(4) if e != spawn_edge]
    for pid in others:
        for _ in range(params.max_retries):
            e = edges_for_distractors[int(rng.integers(len(edges_for_distractors)))]
            x, y = _edge_point(e, float(rng.uniform(5.0, L - 5.0)), float(rng.uniform(lo_t, hi_t)), L)
            if all(math.hypot(x - t.position.x, y - t.position.y) >= params.min_target_separation for t in targets):
                pid = int(pid)
                targets.append(TargetInstance(pid, TARGET_LABELS[pid], Vec3(x, y, TARGET_HEIGHT), 1.0,
                                              pid < N_SEEN_TARGETS))
                break
        else:
            raise SceneConstructionError("target separation: could not place distractor")

    zone = _spawn_zone(spawn_edge, params)
    n_obs = int(rng.integers(params.n_obstacles[0], params.n_obstacles[1] + 1))
    m = params.interior_margin
    obstacles: list[Obstacle] = []
    for _ in range(n_obs):
        for _attempt in range(params.max_retries):
            if rng.random() < params.cylinder_fraction:
                r = float(rng.uniform(*params.cylinder_radius))
                cx, cy = rng.uniform(m + r, L - m - r, size=2)
                h = float(rng.uniform(*params.obstacle_height))
                cand: Obstacle = Cylinder(Vec3(float(cx), float(cy), 0.0), r, h)
            else:
                sx, sy = rng.uniform(*params.box_size, size=2)
                x0 = float(rng.uniform(m, L - m - sx))
                y0 = float(rng.uniform(m, L - m - sy))
                h = float(rng.uniform(*params.obstacle_height))
                cand = AxisBox(Vec3(x0, y0, 0.0), Vec3(x0 + float(sx), y0 + float(sy), h))
            if _obstacle_ok(cand, obstacles, zone, targets, params):
                obstacles.append(cand)
                break
        else:
            raise SceneConstructionError("obstacle placement: no free footprint within retry budget")

    scene = Scene(
        id=scene_id if scene_id is not None else f"scene-{seed:06d}",
        side_length=L,
        obstacles=tuple(obstacles),
        targets=tuple(targets),
        goal_id=targets[0].id,
        spawn_zone=zone,
        rng_seed=int(seed),
        seen=seen,
    )
    if not is_reachable(scene):
        raise SceneConstructionError("reachability: goal not reachable from spawn zone")
    return scene


def _obstacle_ok(cand: Obstacle, placed, zone: SpawnZone, targets, params: SceneParams) -> bool:
    x0, y0, x1, y1 = _footprint_bounds(cand)
    # spawn zone clearance, with an inflation margin for the vehicle body
    pad = UAV_RADIUS + 1.0
    if not (x1 < zone.xmin - pad or x0 > zone.xmax + pad or y1 < zone.ymin - pad or y0 > zone.ymax + pad):
        return False
    probe_r = 5.0 + UAV_RADIUS + 1.0
    for t in targets:
        if _footprint_gap(cand, Cylinder(Vec3(t.position.x, t.position.y, 0.0), probe_r, 1.0)) < 0:
            return False
    return all(_footprint_gap(cand, o) >= params.min_obstacle_gap for o in placed)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def step(state: UavState, action: VelocityAction, dt: float, limits: ActionLimits = DEFAULT_LIMITS) -> UavState:
    if not 0.0 < dt <= 0.5:
        raise ValueError(f"dt must lie in (0, 0.5], got {dt}")
    a = action.clamped(limits)
    p = state.position
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    z = p.z + dt * a.v_vertical
    z = min(max(z, ALTITUDE_MIN), ALTITUDE_MAX)
    return UavState(
        Vec3(p.x + dt * a.v_forward * c, p.y + dt * a.v_forward * s, z),
        wrap_angle(state.yaw + dt * a.yaw_rate),
        state.clock + dt,
    )


# ---------------------------------------------------------------------------
# geometry kernels (vectorised over rays x obstacles)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Geometry:
    cyl: np.ndarray  # (nc, 5): cx, cy, r, z0, z1
    box_lo: np.ndarray  # (nb, 3)
    box_hi: np.ndarray  # (nb, 3)

    @classmethod
    def build(cls, obstacles) -> "_Geometry":
        cyl = [(o.center.x, o.center.y, o.radius, o.center.z, o.center.z + o.height)
               for o in obstacles if isinstance(o, Cylinder)]
        boxes = [o for o in obstacles if isinstance(o, AxisBox)]
        return cls(
            np.array(cyl, dtype=np.float64).reshape(-1, 5),
            np.array([[b.min.x, b.min.y, b.min.z] for b in boxes], dtype=np.float64).reshape(-1, 3),
            np.array([[b.max.x, b.max.y, b.max.z] for b in boxes], dtype=np.float64).reshape(-1, 3),
        )


def _slab(o, d, lo, hi):
    """Entry/exit parameters of rays o + t d against [lo, hi] along one axis.

    o, d: (n, 1); lo, hi: (m,) -> (n, m) arrays.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    par = d == 0.0
    if np.any(par):
        inside = (o >= lo) & (o <= hi)
        par = np.broadcast_to(par, tmin.shape)
        inside = np.broadcast_to(inside, tmin.shape)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def _ray_hits(geom: _Geometry, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Nearest non-negative hit distance per ray against all obstacles (inf if none).

    Rays starting inside a solid report 0.
    """
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    ox, oy, oz = origin
    dx, dy, dz = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    if geom.cyl.shape[0]:
        cx, cy, r, z0, z1 = geom.cyl.T
        px, py = ox - cx, oy - cy  # (m,)
        a = dx * dx + dy * dy  # (n,1)
        b = 2.0 * (px * dx + py * dy)  # (n,m)
        c = px * px + py * py - r * r  # (m,)
        disc = b * b - 4.0 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            t0 = (-b - sq) / (2.0 * a)
            t1 = (-b + sq) / (2.0 * a)
        vertical = np.broadcast_to(a == 0.0, t0.shape)
        inside_r = np.broadcast_to(c <= 0.0, t0.shape)
        t0 = np.where(vertical, np.where(inside_r, -np.inf, np.inf), np.where(disc < 0, np.inf, t0))
        t1 = np.where(vertical, np.where(inside_r, np.inf, -np.inf), np.where(disc < 0, -np.inf, t1))
        tz0, tz1 = _slab(np.full((n, 1), oz), dz, z0, z1)
        tin = np.maximum(t0, tz0)
        tout = np.minimum(t1, tz1)
        hit = (tout >= tin) & (tout >= 0.0)
        t = np.where(hit, np.maximum(tin, 0.0), np.inf)
        best = np.minimum(best, t.min(axis=1))
    if geom.box_lo.shape[0]:
        tin = np.full((n, geom.box_lo.shape[0]), -np.inf)
        tout = np.full_like(tin, np.inf)
        for k, dk in enumerate((dx, dy, dz)):
            a0, a1 = _slab(np.full((n, 1), origin[k]), dk, geom.box_lo[:, k], geom.box_hi[:, k])
            tin = np.maximum(tin, a0)
            tout = np.minimum(tout, a1)
        hit = (tout >= tin) & (tout >= 0.0)
        t = np.where(hit, np.maximum(tin, 0.0), np.inf)
        best = np.minimum(best, t.min(axis=1))
    return best


@lru_cache(maxsize=32)
def camera_rays(w: int, h: int, hfov_deg: float) -> np.ndarray:
    """Unit ray directions in the camera frame (x forward, y left, z up), shape (h*w, 3).

    Pixel (row j, col i) samples its centre; column 0 is the left edge, row 0 the top.
    """
    th = math.tan(math.radians(hfov_deg) / 2.0)
    tv = th * h / w
    u = (1.0 - 2.0 * (np.arange(w) + 0.5) / w) * th
    v = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * tv
    uu, vv = np.meshgrid(u, v)
    d = np.stack([np.ones_like(uu), uu, vv], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d.setflags(write=False)
    return d


def render_depth(scene: Scene, state: UavState, w: int = DEFAULT_DEPTH_W, h: int = DEFAULT_DEPTH_H,
                 hfov: float = DEFAULT_HFOV_DEG, max_range: float = MAX_RANGE) -> DepthImage:
    if w < 1 or h < 1:
        raise ValueError("depth image needs w, h >= 1")
    cam = camera_rays(w, h, hfov)
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    dirs = np.empty_like(cam)
    dirs[:, 0] = cam[:, 0] * c - cam[:, 1] * s
    dirs[:, 1] = cam[:, 0] * s + cam[:, 1] * c
    dirs[:, 2] = cam[:, 2]
    p = state.position
    origin = np.array([p.x, p.y, p.z])
    t = _ray_hits(scene._geometry, origin, dirs)
    with np.errstate(divide="ignore"):
        tg = np.where(dirs[:, 2] < 0.0, -p.z / dirs[:, 2], np.inf)
    t = np.minimum(t, tg)
    t = np.clip(t, MIN_RANGE, max_range)
    return DepthImage(w, h, t.astype(np.float32).reshape(h, w), hfov, max_range)


def signed_distances(scene: Scene, point: Vec3) -> np.ndarray:
    """Signed distance from ``point`` to every obstacle surface (negative inside)."""
    g = scene._geometry
    out = []
    if g.cyl.shape[0]:
        cx, cy, r, z0, z1 = g.cyl.T
        dr = np.hypot(point.x - cx, point.y - cy) - r
        dz = np.maximum(z0 - point.z, point.z - z1)
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        out.append(outside + np.minimum(np.maximum(dr, dz), 0.0))
    if g.box_lo.shape[0]:
        p = np.array([point.x, point.y, point.z])
        center = 0.5 * (g.box_lo + g.box_hi)
        half = 0.5 * (g.box_hi - g.box_lo)
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        out.append(outside + np.minimum(q.max(axis=1), 0.0))
    if not out:
        return np.empty(0)
    return np.concatenate(out)


def check_collision(scene: Scene, state: UavState, uav_radius: float = UAV_RADIUS,
                    d_col: float = 0.0, max_range: float = MAX_RANGE) -> CollisionQuery:
    """Clearance between the vehicle's bounding sphere and the nearest obstacle.

    ``min_obstacle_distance`` is the centre-to-surface signed distance minus
    ``uav_radius``, capped at ``max_range``; contact (<= d_col) is a collision.
    """
    if not uav_radius > 0:
        raise ValueError("uav_radius must be positive")
    sd = signed_distances(scene, state.position)
    clearance = float(sd.min()) - uav_radius if sd.size else max_range
    clearance = min(clearance, max_range)
    return CollisionQuery(clearance <= d_col, clearance)


def target_visible(scene: Scene, state: UavState, target: TargetInstance, hfov: float = DEFAULT_HFOV_DEG,
                   detection_range: float = DETECTION_RANGE) -> VisibilityQuery:
    p, q = state.position, target.position
    dx, dy, dz = q.x - p.x, q.y - p.y, q.z - p.z
    rng = math.sqrt(dx * dx + dy * dy + dz * dz)
    bearing = wrap_angle(math.atan2(dy, dx) - state.yaw) if (dx or dy) else 0.0
    if abs(bearing) > math.radians(hfov) / 2.0 or rng > detection_range:
        return VisibilityQuery(False, bearing, rng)
    if rng > 0.0:
        d = np.array([[dx / rng, dy / rng, dz / rng]])
        hit = _ray_hits(scene._geometry, np.array([p.x, p.y, p.z]), d)[0]
        if hit < rng:
            return VisibilityQuery(False, bearing, rng)
    return VisibilityQuery(True, bearing, rng)


def sample_start(scene: Scene, rng: np.random.Generator, yaw_spread: float = math.pi / 6,
                 altitude: float = CRUISE_ALTITUDE) -> UavState:
    """Random spawn pose inside the scene's spawn zone, facing roughly inward."""
    z = scene.spawn_zone
    x = float(rng.uniform(z.xmin, z.xmax))
    y = float(rng.uniform(z.ymin, z.ymax))
    yaw = z.inward_yaw + float(rng.uniform(-yaw_spread, yaw_spread))
    return UavState(Vec3(x, y, altitude), yaw, 0.0)
