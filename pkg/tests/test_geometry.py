import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probplan.exceptions import HorizonMismatchError, ValidationError
from probplan.geometry import (
    DEFAULT_FOOTPRINT,
    Footprint,
    Polyline,
    Pose2,
    boundary_conflict_mask,
    conflict_with_agent,
    conflict_with_boundary,
    footprints_overlap,
    normalize_angle,
    project_onto_polyline,
    resample_polyline,
    to_local,
    to_world,
    traj_distance,
    waypoint_headings,
)

from helpers import corridor, straight

coords = st.floats(-50, 50, allow_nan=False, allow_infinity=False).map(lambda v: round(v, 4))
trajs = arrays(np.float64, (6, 2), elements=coords)


def test_traj_distance_examples():
    assert traj_distance(np.zeros((6, 2)), np.tile([3.0, 4.0], (6, 1))) == pytest.approx(5.0)
    a = np.random.default_rng(0).normal(size=(6, 2))
    assert traj_distance(a, a) == 0.0
    assert traj_distance([[0, 0], [2, 0]], [[0, 0], [0, 0]]) == pytest.approx(1.0)


def test_traj_distance_horizon_mismatch():
    with pytest.raises(HorizonMismatchError):
        traj_distance(np.zeros((6, 2)), np.zeros((5, 2)))


@given(trajs, trajs, trajs)
def test_traj_distance_is_a_metric(a, b, c):
    dab = traj_distance(a, b)
    assert dab == traj_distance(b, a)
    assert dab >= 0
    assert (dab == 0) == bool(np.all(a == b))
    assert dab <= traj_distance(a, c) + traj_distance(c, b) + 1e-9


def test_footprints_overlap_examples():
    fp = Footprint(4.6, 1.9)
    p = Pose2(1.0, 2.0, 0.3)
    assert footprints_overlap(p, Footprint(1, 1), p, Footprint(3, 2))
    assert not footprints_overlap(Pose2(0, 0), fp, Pose2(10, 0), fp)
    assert footprints_overlap(Pose2(0, 0), fp, Pose2(4.0, 0), fp)


def _grid(center, heading, fp, step=0.01):
    xs = np.arange(-fp.length / 2, fp.length / 2 + step / 2, step)
    ys = np.arange(-fp.width / 2, fp.width / 2 + step / 2, step)
    X, Y = np.meshgrid(np.append(xs, fp.length / 2), np.append(ys, fp.width / 2))
    local = np.stack([X.ravel(), Y.ravel()], axis=-1)
    return to_world(local, (center[0], center[1], heading))


def _inside(points, center, heading, fp):
    loc = to_local(points, (center[0], center[1], heading))
    return (np.abs(loc[:, 0]) <= fp.length / 2 + 1e-9) & (np.abs(loc[:, 1]) <= fp.width / 2 + 1e-9)


def raster_overlap(p1, f1, p2, f2):
    """Dense 1 cm point-sampling oracle."""
    a = _grid((p1.x, p1.y), p1.heading, f1)
    if _inside(a, (p2.x, p2.y), p2.heading, f2).any():
        return True
    b = _grid((p2.x, p2.y), p2.heading, f2)
    return bool(_inside(b, (p1.x, p1.y), p1.heading, f1).any())


def test_overlap_agrees_with_rasterization_oracle():
    # raster(exact) implies overlap; overlap implies raster of a 1.5 cm inflated box.
    rng = np.random.default_rng(7)
    for _ in range(1000):
        f1 = Footprint(rng.uniform(0.5, 3.0), rng.uniform(0.3, 1.5))
        f2 = Footprint(rng.uniform(0.5, 3.0), rng.uniform(0.3, 1.5))
        p1 = Pose2(0.0, 0.0, rng.uniform(-math.pi, math.pi))
        p2 = Pose2(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-math.pi, math.pi))
        got = footprints_overlap(p1, f1, p2, f2)
        assert got == footprints_overlap(p2, f2, p1, f1)
        if raster_overlap(p1, f1, p2, f2):
            assert got
        if got:
            assert raster_overlap(p1, f1.inflated(0.015), p2, f2.inflated(0.015))


def test_conflict_with_agent_examples():
    ego = straight(5.0)
    agent = np.tile([10.0, 0.0, 0.0], (6, 1))
    assert conflict_with_agent(ego, DEFAULT_FOOTPRINT, agent, DEFAULT_FOOTPRINT)
    far = np.tile([100.0, 0.0, 0.0], (6, 1))
    assert not conflict_with_agent(ego, DEFAULT_FOOTPRINT, far, DEFAULT_FOOTPRINT)
    near = np.tile([3.0, 0.0, 0.0], (6, 1))
    assert conflict_with_agent(np.zeros((6, 2)), DEFAULT_FOOTPRINT, near, DEFAULT_FOOTPRINT)


def test_conflict_onset_time():
    # centres within 4.6 m once 5t >= 5.4, i.e. from t = 1.08 s: the midpoint at 1.25 s is the first hit
    ego = straight(5.0)
    agent = np.tile([10.0, 0.0, 0.0], (6, 1))
    assert not conflict_with_agent(ego[:2], DEFAULT_FOOTPRINT, agent[:2], DEFAULT_FOOTPRINT)
    assert conflict_with_agent(ego[:3], DEFAULT_FOOTPRINT, agent[:3], DEFAULT_FOOTPRINT)


def test_agent_future_shape_checked():
    with pytest.raises(HorizonMismatchError):
        conflict_with_agent(straight(5.0), DEFAULT_FOOTPRINT, np.zeros((5, 3)), DEFAULT_FOOTPRINT)


def test_conflict_with_boundary_examples():
    walls = corridor(3.5)
    assert not conflict_with_boundary(straight(8.0), DEFAULT_FOOTPRINT, walls)
    crossing = np.stack([np.linspace(2, 12, 6), np.linspace(1, 6, 6)], axis=-1)
    assert conflict_with_boundary(crossing, DEFAULT_FOOTPRINT, walls)
    hugging = straight(8.0, y=3.0)  # 0.5 m from the wall, half-width 0.95
    assert conflict_with_boundary(hugging, DEFAULT_FOOTPRINT, walls)


def test_boundary_check_ignores_other_polyline_kinds():
    lines = [Polyline(np.array([[-5.0, 0.0], [50.0, 0.0]]), "lane_divider")]
    assert not conflict_with_boundary(straight(8.0), DEFAULT_FOOTPRINT, lines)


@settings(max_examples=60)
@given(
    trajs,
    st.floats(-20, 20),
    st.floats(-5, 5),
    st.floats(-math.pi, math.pi),
    st.floats(0.0, 2.0),
    st.floats(0.0, 2.0),
)
def test_conflicts_are_monotone_in_footprint_size(plan, ax, ay, ah, grow_ego, grow_agent):
    small = Footprint(2.0, 1.0)
    agent = np.tile([ax, ay, ah], (6, 1))
    base = conflict_with_agent(plan / 5, small, agent, small)
    grown = conflict_with_agent(plan / 5, small.inflated(grow_ego), agent, small.inflated(grow_agent))
    assert grown or not base
    walls = corridor(3.5)
    b0 = boundary_conflict_mask(plan[None] / 5, small, walls)[0]
    b1 = boundary_conflict_mask(plan[None] / 5, small.inflated(grow_ego), walls)[0]
    assert b1 or not b0


def test_waypoint_headings_inherit_on_tiny_steps():
    a = np.array([[1.0, 1.0], [1.0, 1.005], [1.0, 2.0], [1.0, 2.0]])
    h = waypoint_headings(a)
    assert h[0] == pytest.approx(math.pi / 4)
    assert h[1] == pytest.approx(math.pi / 4)
    assert h[2] == pytest.approx(math.pi / 2)
    assert h[3] == pytest.approx(math.pi / 2)
    assert waypoint_headings(np.zeros((3, 2))).tolist() == [0.0, 0.0, 0.0]


def test_pose_and_footprint_invariants():
    assert Pose2(0, 0, 3 * math.pi).heading == pytest.approx(math.pi)
    assert Pose2(0, 0, -math.pi).heading == pytest.approx(math.pi)
    with pytest.raises(ValidationError):
        Footprint(0.0, 1.0)
    with pytest.raises(ValidationError):
        Polyline(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValidationError):
        Polyline(np.array([[0.0, 0.0]]))


@given(st.floats(-1e3, 1e3))
def test_normalize_angle_range(theta):
    h = normalize_angle(theta)
    assert -math.pi < h <= math.pi
    assert math.isclose(math.cos(h), math.cos(theta), abs_tol=1e-9)


@given(arrays(np.float64, (5, 2), elements=coords), coords, coords, st.floats(-math.pi, math.pi))
def test_frame_transforms_round_trip(pts, x, y, h):
    back = to_world(to_local(pts, (x, y, h)), (x, y, h))
    assert np.allclose(back, pts, atol=1e-9)


def test_resampling_is_arclength_uniform():
    rng = np.random.default_rng(3)
    pts = np.cumsum(rng.uniform(0.2, 3.0, size=(12, 2)), axis=0)
    res = resample_polyline(pts, 20)
    seg = np.linalg.norm(np.diff(res, axis=0), axis=1)
    # along a polyline the chord may cut a corner, so compare arclength positions instead
    s = np.array([project_onto_polyline(pts, p)[0] for p in res])
    total = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    assert np.allclose(s, np.linspace(0, total, 20), rtol=1e-6, atol=1e-6 * total)
    assert np.all(seg > 0)
