"""Planar primitives and the collision predicates shared by losses, rules and metrics.

Trajectories are plain ``(T, 2)`` float arrays in the ego frame (x forward,
y left); waypoint ``t`` sits at time ``(t + 1) * dt_wp``. Oriented rectangles
are tested with the separating-axis theorem, vectorized so a whole planning
vocabulary can be checked against a scene in one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import HorizonMismatchError, ValidationError

POLYLINE_KINDS = ("lane_centerline", "lane_divider", "road_boundary", "pedestrian_crossing")
COORD_LIMIT = 1000.0
# steps shorter than this inherit the previous heading
MIN_STEP = 0.01


def normalize_angle(theta):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValidationError(f"non-finite pose {self}")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass(frozen=True)
class Footprint:
    length: float = 4.6
    width: float = 1.9

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValidationError(f"footprint dimensions must be positive, got {self}")

    def inflated(self, margin: float) -> "Footprint":
        return Footprint(self.length + 2 * margin, self.width + 2 * margin)


DEFAULT_FOOTPRINT = Footprint()


@dataclass(frozen=True, eq=False)
class Polyline:
    points: np.ndarray
    kind: str = "road_boundary"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValidationError(f"polyline needs >= 2 planar points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("polyline has non-finite coordinates")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
            raise ValidationError("polyline has repeated consecutive points")
        if self.kind not in POLYLINE_KINDS:
            raise ValidationError(f"unknown polyline kind {self.kind!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        return (
            isinstance(other, Polyline)
            and self.kind == other.kind
            and self.points.shape == other.points.shape
            and bool(np.all(self.points == other.points))
        )

    __hash__ = None

    @property
    def segments(self) -> np.ndarray:
        """``(k-1, 2, 2)`` array of consecutive point pairs."""
        return np.stack([self.points[:-1], self.points[1:]], axis=1)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


def check_trajectory(a, horizon: int | None = None) -> np.ndarray:
    """Return ``a`` as a float ``(T, 2)`` array after validating its invariants."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
        raise ValidationError(f"trajectory must have shape (T, 2), got {arr.shape}")
    if horizon is not None and arr.shape[0] != horizon:
        raise HorizonMismatchError(f"expected T={horizon}, got T={arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("trajectory has non-finite coordinates")
    if np.any(np.abs(arr) > COORD_LIMIT):
        raise ValidationError(f"trajectory coordinate exceeds {COORD_LIMIT} m")
    return arr


def traj_distance(a, b) -> float:
    """Average displacement error between two equal-horizon trajectories."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise HorizonMismatchError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def traj_distances(trajs, b) -> np.ndarray:
    """ADE from every trajectory in ``trajs`` (``(n, T, 2)``) to ``b``."""
    trajs = np.asarray(trajs, dtype=float)
    b = np.asarray(b, dtype=float)
    if trajs.shape[1:] != b.shape:
        raise HorizonMismatchError(f"trajectory shapes differ: {trajs.shape[1:]} vs {b.shape}")
    return np.mean(np.linalg.norm(trajs - b, axis=-1), axis=-1)


def waypoint_headings(trajs) -> np.ndarray:
    """Heading at each waypoint from the incoming displacement.

    The first step is measured from the ego origin. Steps shorter than 1 cm
    keep the previous heading (0 before the first real step). Accepts any
    leading batch shape ``(..., T, 2)``.
    """
    trajs = np.asarray(trajs, dtype=float)
    prev = np.concatenate([np.zeros(trajs.shape[:-2] + (1, 2)), trajs[..., :-1, :]], axis=-2)
    steps = trajs - prev
    raw = np.arctan2(steps[..., 1], steps[..., 0])
    moving = np.linalg.norm(steps, axis=-1) >= MIN_STEP
    out = np.empty(trajs.shape[:-1])
    last = np.zeros(trajs.shape[:-2])
    for t in range(trajs.shape[-2]):
        last = np.where(moving[..., t], raw[..., t], last)
        out[..., t] = last
    return out


def trajectory_poses(trajs, midpoints: bool = False) -> np.ndarray:
    """``(..., P, 3)`` poses (x, y, heading) along ego trajectories.

    With ``midpoints`` the waypoints are interleaved with one interpolated
    pose between each consecutive pair, giving ``P = 2T - 1``.
    """
    trajs = np.asarray(trajs, dtype=float)
    poses = np.concatenate([trajs, waypoint_headings(trajs)[..., None]], axis=-1)
    return interleave_midpoints(poses) if midpoints else poses


def interleave_midpoints(poses) -> np.ndarray:
    """Insert the mean pose between consecutive ``(..., P, 3)`` poses."""
    poses = np.asarray(poses, dtype=float)
    a, b = poses[..., :-1, :], poses[..., 1:, :]
    mid = 0.5 * (a + b)
    mid[..., 2] = a[..., 2] + 0.5 * normalize_angle(b[..., 2] - a[..., 2])
    n = poses.shape[-2]
    out = np.empty(poses.shape[:-2] + (2 * n - 1, 3))
    out[..., 0::2, :] = poses
    out[..., 1::2, :] = mid
    return out


def boxes_overlap(c1, h1, len1, wid1, c2, h2, len2, wid2) -> np.ndarray:
    """Separating-axis test between oriented rectangles, with broadcasting.

    Centers are ``(..., 2)``; headings, lengths and widths broadcast against
    the leading shape. Touching rectangles count as overlapping. A zero width
    turns a rectangle into a segment, which is how boundary checks reuse this.
    """
    c1, c2 = np.asarray(c1, dtype=float), np.asarray(c2, dtype=float)
    h1, h2 = np.asarray(h1, dtype=float), np.asarray(h2, dtype=float)
    d = c2 - c1
    dx, dy = d[..., 0], d[..., 1]
    cos1, sin1, cos2, sin2 = np.cos(h1), np.sin(h1), np.cos(h2), np.sin(h2)
    hl1, hw1, hl2, hw2 = 0.5 * np.asarray(len1), 0.5 * np.asarray(wid1), 0.5 * np.asarray(len2), 0.5 * np.asarray(wid2)
    # cosine of relative heading and its sine, shared by all four axes
    cr = np.abs(cos1 * cos2 + sin1 * sin2)
    sr = np.abs(sin1 * cos2 - cos1 * sin2)
    tol = 1e-9
    sep = np.abs(dx * cos1 + dy * sin1) > hl1 + hl2 * cr + hw2 * sr + tol
    sep |= np.abs(-dx * sin1 + dy * cos1) > hw1 + hl2 * sr + hw2 * cr + tol
    sep |= np.abs(dx * cos2 + dy * sin2) > hl2 + hl1 * cr + hw1 * sr + tol
    sep |= np.abs(-dx * sin2 + dy * cos2) > hw2 + hl1 * sr + hw1 * cr + tol
    return ~sep


def footprints_overlap(p1: Pose2, f1: Footprint, p2: Pose2, f2: Footprint) -> bool:
    return bool(
        boxes_overlap(p1.position, p1.heading, f1.length, f1.width, p2.position, p2.heading, f2.length, f2.width)
    )


def box_corners(center, heading, length, width) -> np.ndarray:
    """Corner points ``(..., 4, 2)`` counter-clockwise from front-left."""
    center = np.asarray(center, dtype=float)
    c, s = np.cos(heading), np.sin(heading)
    local = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]) * [length, width]
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return center[..., None, :] + np.einsum("...ij,kj->...ki", rot, local)


def _segment_arrays(boundaries: Iterable[Polyline]) -> np.ndarray:
    segs = [p.segments for p in boundaries]
    return np.concatenate(segs, axis=0) if segs else np.zeros((0, 2, 2))


def poses_hit_segments(poses, footprint: Footprint, segments) -> np.ndarray:
    """Which ``(..., 3)`` poses put the footprint across any ``(S, 2, 2)`` segment."""
    poses = np.asarray(poses, dtype=float)
    segments = np.asarray(segments, dtype=float)
    if len(segments) == 0:
        return np.zeros(poses.shape[:-1], dtype=bool)
    vec = segments[:, 1] - segments[:, 0]
    seg_c = 0.5 * (segments[:, 0] + segments[:, 1])
    seg_h = np.arctan2(vec[:, 1], vec[:, 0])
    seg_len = np.linalg.norm(vec, axis=1)
    hits = boxes_overlap(
        poses[..., None, :2], poses[..., None, 2], footprint.length, footprint.width, seg_c, seg_h, seg_len, 0.0
    )
    return hits.any(axis=-1)


def conflict_with_agent(
    ego,
    ego_fp: Footprint,
    agent_future,
    agent_fp: Footprint,
    margin: float = 0.0,
) -> bool:
    """Whether the ego plan overlaps an agent's future at any shared instant.

    ``agent_future`` is ``(T, 3)`` (x, y, heading) on the ego plan's time grid.
    Poses are compared at every waypoint and at the midpoint between
    consecutive waypoints.
    """
    ego = np.asarray(ego, dtype=float)
    agent_future = np.asarray(agent_future, dtype=float)
    if agent_future.shape != (ego.shape[0], 3):
        raise HorizonMismatchError(f"agent future {agent_future.shape} does not match ego horizon {ego.shape[0]}")
    return bool(agents_conflict_mask(ego[None], ego_fp, agent_future[None], [agent_fp], margin)[0])


def agents_conflict_mask(
    plans,
    ego_fp: Footprint,
    agent_futures,
    agent_fps: Sequence[Footprint],
    margin: float = 0.0,
    horizon: int | None = None,
) -> np.ndarray:
    """Vectorized agent conflict over many plans: ``(N, T, 2)`` x ``(A, T, 3)`` -> ``(N,)``.

    ``horizon`` restricts the check to the first ``horizon`` waypoints.
    """
    plans = np.asarray(plans, dtype=float)
    n = plans.shape[0]
    agent_futures = np.asarray(agent_futures, dtype=float).reshape(-1, plans.shape[1], 3)
    if len(agent_futures) == 0:
        return np.zeros(n, dtype=bool)
    if horizon is not None:
        plans = plans[:, :horizon]
        agent_futures = agent_futures[:, :horizon]
    ego_fp = ego_fp.inflated(margin)
    ego_poses = trajectory_poses(plans, midpoints=True)  # (N, P, 3)
    ag_poses = interleave_midpoints(agent_futures)  # (A, P, 3)
    lengths = np.array([f.inflated(margin).length for f in agent_fps])[:, None]
    widths = np.array([f.inflated(margin).width for f in agent_fps])[:, None]
    hit = boxes_overlap(
        ego_poses[:, None, :, :2],
        ego_poses[:, None, :, 2],
        ego_fp.length,
        ego_fp.width,
        ag_poses[None, :, :, :2],
        ag_poses[None, :, :, 2],
        lengths[None],
        widths[None],
    )
    return hit.any(axis=(1, 2))


def conflict_with_boundary(ego, ego_fp: Footprint, boundaries: Iterable[Polyline], margin: float = 0.0) -> bool:
    """Whether the footprint posed at any waypoint crosses a boundary segment."""
    ego = np.asarray(ego, dtype=float)
    return bool(boundary_conflict_mask(ego[None], ego_fp, boundaries, margin)[0])


def boundary_conflict_mask(plans, ego_fp: Footprint, boundaries: Iterable[Polyline], margin: float = 0.0) -> np.ndarray:
    plans = np.asarray(plans, dtype=float)
    segments = _segment_arrays(b for b in boundaries if b.kind == "road_boundary")
    poses = trajectory_poses(plans)
    return poses_hit_segments(poses, ego_fp.inflated(margin), segments).any(axis=-1)


def to_local(points, origin) -> np.ndarray:
    """Express world ``(..., 2)`` points in the frame of ``origin`` (x, y, heading)."""
    ox, oy, oh = origin[0], origin[1], origin[2]
    p = np.asarray(points, dtype=float) - np.array([ox, oy])
    c, s = math.cos(oh), math.sin(oh)
    return np.stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1]], axis=-1)


def to_world(points, origin) -> np.ndarray:
    """Inverse of :func:`to_local`."""
    ox, oy, oh = origin[0], origin[1], origin[2]
    p = np.asarray(points, dtype=float)
    c, s = math.cos(oh), math.sin(oh)
    return np.stack([c * p[..., 0] - s * p[..., 1] + ox, s * p[..., 0] + c * p[..., 1] + oy], axis=-1)


def poses_to_local(poses, origin) -> np.ndarray:
    poses = np.asarray(poses, dtype=float)
    out = np.empty_like(poses)
    out[..., :2] = to_local(poses[..., :2], origin)
    out[..., 2] = normalize_angle(poses[..., 2] - origin[2])
    return out


def poses_to_world(poses, origin) -> np.ndarray:
    poses = np.asarray(poses, dtype=float)
    out = np.empty_like(poses)
    out[..., :2] = to_world(poses[..., :2], origin)
    out[..., 2] = normalize_angle(poses[..., 2] + origin[2])
    return out


def cumulative_arclength(points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])


def resample_polyline(points, n: int) -> np.ndarray:
    """``n`` points spaced uniformly by arclength, endpoints included."""
    points = np.asarray(points, dtype=float)
    s = cumulative_arclength(points)
    targets = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(targets, s, points[:, 0]), np.interp(targets, s, points[:, 1])], axis=-1)


def project_onto_polyline(points, point) -> tuple[float, float]:
    """Arclength and signed lateral offset (left positive) of ``point`` on a polyline."""
    points = np.asarray(points, dtype=float)
    point = np.asarray(point, dtype=float)
    a, b = points[:-1], points[1:]
    ab = b - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", point - a, ab) / seg_len2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    dist = np.linalg.norm(point - proj, axis=1)
    i = int(np.argmin(dist))
    s = cumulative_arclength(points)
    cross = ab[i, 0] * (point[1] - a[i, 1]) - ab[i, 1] * (point[0] - a[i, 0])
    return float(s[i] + t[i] * math.sqrt(seg_len2[i])), float(math.copysign(dist[i], cross) if cross != 0 else 0.0)


def point_along_polyline(points, s: float):
    """Position and tangent heading at arclength ``s`` (extrapolates past the ends)."""
    points = np.asarray(points, dtype=float)
    cum = cumulative_arclength(points)
    i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(points) - 2))
    seg = points[i + 1] - points[i]
    seg_len = float(np.linalg.norm(seg))
    u = seg / seg_len
    p = points[i] + u * (s - cum[i])
    return p, math.atan2(u[1], u[0])
