import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navfly.planner import optimal_path_length
from navfly.world import (
    ALTITUDE_MAX,
    ALTITUDE_MIN,
    MAX_RANGE,
    AxisBox,
    Cylinder,
    DepthImage,
    Scene,
    SceneConstructionError,
    SceneParams,
    TargetInstance,
    UavState,
    Vec3,
    VelocityAction,
    check_collision,
    generate_scene,
    render_depth,
    sample_start,
    step,
    target_visible,
    wrap_angle,
)

from conftest import make_scene, pillar, pose, wall

# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def test_vec3_rejects_non_finite():
    with pytest.raises(ValueError):
        Vec3(float("nan"), 0.0, 0.0)


def test_obstacle_invariants():
    with pytest.raises(ValueError):
        Cylinder(Vec3(0, 0, 0), 0.0, 1.0)
    with pytest.raises(ValueError):
        AxisBox(Vec3(0, 0, 0), Vec3(1, 0, 1))


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_action_is_clamped_to_limits():
    a = VelocityAction(10.0, -4.0, 2.5).clamped()
    assert a.as_tuple() == (3.0, -1.5, 1.0)


# ---------------------------------------------------------------------------
# generate_scene
# ---------------------------------------------------------------------------


def test_degenerate_scene_has_no_obstacles_and_goal_on_boundary():
    sc = generate_scene(0, SceneParams(n_obstacles=(0, 0), n_distractors=(0, 0)))
    assert sc.obstacles == ()
    assert len(sc.targets) == 1
    g = sc.goal.position
    L = sc.side_length
    assert min(g.x, g.y, L - g.x, L - g.y) <= 5.0


def test_same_seed_gives_identical_bytes():
    assert generate_scene(7).to_json() == generate_scene(7).to_json()
    assert generate_scene(7).to_json() != generate_scene(8).to_json()


def test_scene_json_round_trip():
    sc = generate_scene(3)
    assert Scene.from_json(sc.to_json()) == sc
    assert Scene.from_json(sc.to_json()).to_json() == sc.to_json()


def test_scene_rejects_unknown_schema():
    d = generate_scene(3).to_dict()
    d["schema"] = 2
    with pytest.raises(ValueError):
        Scene.from_dict(d)


def _footprint_area_overlap(a, b, n=200):
    """Monte-Carlo-free grid estimate of footprint intersection area over min area."""
    def box(o):
        if isinstance(o, Cylinder):
            return (o.center.x - o.radius, o.center.y - o.radius, o.center.x + o.radius, o.center.y + o.radius)
        return (o.min.x, o.min.y, o.max.x, o.max.y)

    def inside(o, X, Y):
        if isinstance(o, Cylinder):
            return (X - o.center.x) ** 2 + (Y - o.center.y) ** 2 <= o.radius ** 2
        return (X >= o.min.x) & (X <= o.max.x) & (Y >= o.min.y) & (Y <= o.max.y)

    ba, bb = box(a), box(b)
    x0, y0 = min(ba[0], bb[0]), min(ba[1], bb[1])
    x1, y1 = max(ba[2], bb[2]), max(ba[3], bb[3])
    X, Y = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
    ia, ib = inside(a, X, Y), inside(b, X, Y)
    return (ia & ib).sum() / max(1, min(ia.sum(), ib.sum()))


def test_generated_scene_invariants():
    for seed in range(25):
        sc = generate_scene(seed)
        z = sc.spawn_zone
        L = sc.side_length
        assert 4 <= len(sc.targets) <= 6
        for t in sc.targets:
            p = t.position
            assert min(p.x, p.y, L - p.x, L - p.y) <= 5.0
        for o in sc.obstacles:
            if isinstance(o, Cylinder):
                fx0, fy0 = o.center.x - o.radius, o.center.y - o.radius
                fx1, fy1 = o.center.x + o.radius, o.center.y + o.radius
            else:
                fx0, fy0, fx1, fy1 = o.min.x, o.min.y, o.max.x, o.max.y
            assert fx1 < z.xmin or fx0 > z.xmax or fy1 < z.ymin or fy0 > z.ymax
        obs = sc.obstacles
        for i in range(len(obs)):
            for j in range(i + 1, len(obs)):
                assert _footprint_area_overlap(obs[i], obs[j]) <= 0.5


def test_hundred_scenes_are_reachable_per_planner_oracle():
    rng = np.random.default_rng(0)
    for seed in range(100):
        sc = generate_scene(seed)
        start = sample_start(sc, rng)
        d = optimal_path_length(sc, start.position, sc.goal.position)
        assert math.isfinite(d) and d > 0


def test_impossible_params_raise_construction_error():
    params = SceneParams(n_obstacles=(200, 200), box_size=(8.0, 9.0), cylinder_fraction=0.0, max_retries=5)
    with pytest.raises(SceneConstructionError, match="obstacle"):
        generate_scene(0, params)


# ---------------------------------------------------------------------------
# step
# ---------------------------------------------------------------------------


@given(st.floats(0.01, 0.5), st.floats(-math.pi, math.pi))
def test_zero_action_is_identity(dt, yaw):
    s = pose(10.0, 20.0, 3.0, yaw)
    s2 = step(s, VelocityAction(), dt)
    assert s2.position == s.position
    assert s2.yaw == s.yaw


def test_forward_step_exact():
    s2 = step(pose(0.0, 0.0, 2.0, 0.0), VelocityAction(2.0, 0.0, 0.0), 0.5)
    assert s2.position.x == 1.0
    assert s2.position.y == 0.0


def test_step_rejects_bad_dt():
    with pytest.raises(ValueError):
        step(pose(0, 0), VelocityAction(), 0.0)
    with pytest.raises(ValueError):
        step(pose(0, 0), VelocityAction(), 0.6)


def test_altitude_is_clamped():
    s = pose(0, 0, 9.9)
    for _ in range(10):
        s = step(s, VelocityAction(0, 0, 1.0), 0.5)
    assert s.position.z == ALTITUDE_MAX
    for _ in range(40):
        s = step(s, VelocityAction(0, 0, -1.0), 0.5)
    assert s.position.z == ALTITUDE_MIN


def test_reversed_straight_line_returns_to_start():
    rng = np.random.default_rng(5)
    s0 = pose(30.0, 30.0, 5.0, 0.7)
    acts = [(VelocityAction(float(rng.uniform(-3, 3)), 0.0, float(rng.uniform(-0.05, 0.05))),
             float(rng.uniform(0.05, 0.5))) for _ in range(100)]
    s = s0
    for a, dt in acts:
        s = step(s, a, dt)
    for a, dt in reversed(acts):
        s = step(s, VelocityAction(-a.v_forward, 0.0, -a.v_vertical), dt)
    assert s.position.distance_to(s0.position) < 1e-9


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-0.05, 0.05), st.floats(0.01, 0.5)), min_size=1, max_size=50))
def test_path_length_equals_sum_of_commanded_speeds(seq):
    s = pose(30.0, 30.0, 5.0, 0.3)
    travelled, expected = 0.0, 0.0
    for vf, vv, dt in seq:
        a = VelocityAction(vf, 0.0, vv)
        s2 = step(s, a, dt)
        travelled += s.position.distance_to(s2.position)
        expected += dt * math.hypot(a.v_forward, a.v_vertical)
        s = s2
    assert travelled == pytest.approx(expected, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# render_depth
# ---------------------------------------------------------------------------


def _oracle_dirs(w, h, hfov_deg, yaw):
    """Pinhole rays built independently of the renderer (world frame, unit length)."""
    f = (w / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    out = np.zeros((h, w, 3))
    for j in range(h):
        for i in range(w):
            px = (w / 2.0) - (i + 0.5)  # positive to the left
            py = (h / 2.0) - (j + 0.5)  # positive up
            v = np.array([f, px, py])
            v /= np.linalg.norm(v)
            c, s = math.cos(yaw), math.sin(yaw)
            out[j, i] = [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    return out


def _oracle_cylinder_depth(origin, dirs, cyl, max_range=MAX_RANGE):
    """Closed-form ray / finite-cylinder / ground intersection, one ray at a time."""
    h, w, _ = dirs.shape
    out = np.full((h, w), max_range)
    cx, cy, r = cyl.center.x, cyl.center.y, cyl.radius
    z0, z1 = cyl.center.z, cyl.center.z + cyl.height
    for j in range(h):
        for i in range(w):
            d = dirs[j, i]
            best = max_range
            if d[2] < 0:
                best = min(best, -origin[2] / d[2])
            a = d[0] ** 2 + d[1] ** 2
            px, py = origin[0] - cx, origin[1] - cy
            b = 2 * (px * d[0] + py * d[1])
            c = px * px + py * py - r * r
            disc = b * b - 4 * a * c
            if a > 0 and disc >= 0:
                t = (-b - math.sqrt(disc)) / (2 * a)
                if t >= 0 and z0 <= origin[2] + t * d[2] <= z1:
                    best = min(best, t)
            out[j, i] = best
    return out


def test_empty_scene_center_pixel_is_max_range(empty_scene):
    d = render_depth(empty_scene, pose(35.0, 35.0, 2.0, 0.0), 33, 25)
    assert d.ranges[12, 16] == pytest.approx(MAX_RANGE)


def test_wall_ten_metres_ahead():
    sc = make_scene([wall(20.0, y0=0.0, y1=40.0)])
    d = render_depth(sc, pose(10.0, 20.0, 2.0, 0.0), 33, 25)
    assert d.ranges[12, 16] == pytest.approx(10.0, abs=1e-6)


def test_depth_shape_and_range_invariants():
    sc = generate_scene(2)
    d = render_depth(sc, sample_start(sc, np.random.default_rng(0)))
    assert d.ranges.shape == (24, 32)
    assert np.all(d.ranges > 0) and np.all(d.ranges <= MAX_RANGE)


def test_offset_cylinder_matches_brute_force_oracle_at_double_resolution():
    cyl = pillar(12.0, 22.0, r=1.5)
    sc = make_scene([cyl])
    st_ = pose(2.0, 20.0, 2.0, 0.0)
    w, h = 64, 48
    got = render_depth(sc, st_, w, h).ranges.astype(np.float64)
    want = _oracle_cylinder_depth(np.array([2.0, 20.0, 2.0]), _oracle_dirs(w, h, 90.0, 0.0), cyl)
    assert np.allclose(got, want, rtol=1e-5, atol=1e-4)
    # cylinder sits left of the optical axis: left half strictly nearer in every row it spans
    # compare each left pixel with its mirror image across the optical axis
    spanned = 0
    for img in (want, got):
        left, right = img[:, : w // 2], img[:, w // 2:][:, ::-1]
        assert np.all(left <= right + 1e-9)
        rows = np.any(left < right - 1e-6, axis=1)
        spanned = max(spanned, int(rows.sum()))
        for j in np.nonzero(rows)[0]:
            assert left[j].min() <= right[j].min()
    assert spanned > h // 4


@settings(max_examples=40, deadline=None)
@given(st.floats(5, 60), st.floats(5, 60), st.floats(0.5, 3.0), st.floats(-math.pi, math.pi))
def test_adding_an_obstacle_never_increases_range(x, y, r, yaw):
    base = make_scene([wall(50.0, y0=10.0, y1=30.0)])
    more = make_scene(list(base.obstacles) + [pillar(x, y, r)])
    s = pose(30.0, 20.0, 2.0, yaw)
    a = render_depth(base, s).ranges
    b = render_depth(more, s).ranges
    assert np.all(b <= a)


def test_depth_image_equality_and_validation():
    r = np.full((2, 3), 5.0)
    assert DepthImage(3, 2, r) == DepthImage(3, 2, r.copy())
    with pytest.raises(ValueError):
        DepthImage(4, 2, r)


# ---------------------------------------------------------------------------
# check_collision
# ---------------------------------------------------------------------------


def test_empty_scene_no_collision(empty_scene):
    q = check_collision(empty_scene, pose(10, 10))
    assert not q.collided
    assert q.min_obstacle_distance == MAX_RANGE


def test_on_cylinder_axis():
    sc = make_scene([pillar(20.0, 20.0, r=1.0, h=15.0)])
    q = check_collision(sc, pose(20.0, 20.0, 5.0), 0.3)
    assert q.collided
    assert q.min_obstacle_distance == pytest.approx(-(1.0 + 0.3))


def test_collision_matches_point_to_box_oracle_on_grid():
    lo, hi = np.array([10.0, 12.0, 0.0]), np.array([14.0, 15.0, 6.0])
    sc = make_scene([AxisBox(Vec3(*lo), Vec3(*hi))])
    xs = np.linspace(6.0, 18.0, 25)
    ys = np.linspace(8.0, 19.0, 20)
    zs = np.linspace(0.5, 10.0, 20)
    n = 0
    for x in xs:
        for y in ys:
            for z in zs:
                p = np.array([x, y, z])
                inside = np.all(p >= lo) and np.all(p <= hi)
                if inside:
                    sd = -min(np.min(p - lo), np.min(hi - p))
                else:
                    sd = float(np.linalg.norm(p - np.clip(p, lo, hi)))
                q = check_collision(sc, pose(x, y, z), 0.3)
                assert q.min_obstacle_distance == pytest.approx(sd - 0.3, abs=1e-12)
                assert q.collided == (sd - 0.3 <= 0.0)
                n += 1
    assert n == 10_000


def test_collision_implies_near_pixel_when_contact_in_view():
    sc = make_scene([wall(20.0, y0=0.0, y1=40.0)])
    s = pose(19.8, 20.0, 2.0, 0.0)
    assert check_collision(sc, s, 0.3).collided
    assert render_depth(sc, s).ranges.min() <= 0.3


def test_rejects_non_positive_radius(empty_scene):
    with pytest.raises(ValueError):
        check_collision(empty_scene, pose(1, 1), 0.0)


# ---------------------------------------------------------------------------
# target_visible
# ---------------------------------------------------------------------------


def _target(x, y, z=2.0):
    return TargetInstance(9, "black chair", Vec3(x, y, z), 1.0, True)


def test_target_dead_ahead_visible(empty_scene):
    q = target_visible(empty_scene, pose(10.0, 10.0, 2.0, 0.0), _target(20.0, 10.0))
    assert q.visible
    assert q.bearing == 0.0
    assert q.range == pytest.approx(10.0)


def test_target_behind_is_never_visible(empty_scene):
    q = target_visible(empty_scene, pose(10.0, 10.0, 2.0, 0.0), _target(0.0, 10.0))
    assert not q.visible
    assert q.bearing == pytest.approx(math.pi)


def test_target_beyond_detection_range(empty_scene):
    assert not target_visible(empty_scene, pose(0.0, 10.0), _target(26.0, 10.0)).visible


def test_wall_occludes_and_removal_restores():
    t = _target(25.0, 10.0)
    occluded = make_scene([wall(15.0, y0=0.0, y1=20.0)])
    s = pose(10.0, 10.0, 2.0, 0.0)
    assert not target_visible(occluded, s, t).visible
    assert target_visible(make_scene([]), s, t).visible


@settings(max_examples=60, deadline=None)
@given(st.floats(-math.pi / 4 + 1e-3, math.pi / 4 - 1e-3), st.floats(1.0, 24.0), st.integers(0, 50))
def test_removing_obstacles_reveals_in_fov_targets(bearing, rng_, seed):
    sc = generate_scene(seed % 10)
    s = pose(35.0, 35.0, 2.0, 0.3)
    t = _target(35.0 + rng_ * math.cos(0.3 + bearing), 35.0 + rng_ * math.sin(0.3 + bearing), 2.0)
    bare = make_scene([], targets=sc.targets, goal_id=sc.goal_id)
    assert target_visible(bare, s, t).visible


def test_sample_start_inside_spawn_zone():
    sc = generate_scene(11)
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = sample_start(sc, rng)
        assert sc.spawn_zone.contains(s.position.x, s.position.y)
        assert isinstance(s, UavState)
