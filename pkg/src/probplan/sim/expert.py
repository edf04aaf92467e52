"""Rule-based demonstrator: pure-pursuit steering plus IDM car following.

The expert works entirely in the ego frame of the snapshot it is given. At
each replan it freezes a context (reference path, leads, stop targets) and
forward-simulates its own control law on the bicycle plant; the sampled
poses are the ground-truth plan used for training, and the same law keeps
driving the car until the next replan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import EpisodeComplete
from ..geometry import Pose2, cumulative_arclength, point_along_polyline, project_onto_polyline
from ..scene import ControlCommand, SceneSnapshot
from .control import DEFAULT_VEHICLE, EgoState, VehicleParams, accel_to_command, bicycle_step

VARIANTS = ("default", "yield", "overtake")


@dataclass(frozen=True)
class ExpertConfig:
    desired_speed: float = 8.0
    idm_accel: float = 2.0
    idm_decel: float = 3.0
    time_headway: float = 1.2
    min_gap: float = 3.0
    static_gap: float = 4.0
    yield_gap: float = 3.0
    lane_width: float = 3.5
    decision_distance: float = 22.0
    # overtaking needs this much slack (s) before oncoming traffic reaches the obstacle
    overtake_margin: float = 2.0
    lookahead_gain: float = 1.0
    lookahead_min: float = 4.0
    lookahead_max: float = 10.0
    ego_length: float = 4.6
    stop_margin: float = 1.0
    goal_tolerance: float = 2.0


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _left_normals(points: np.ndarray) -> np.ndarray:
    tang = np.gradient(points, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


@dataclass
class _Track:
    """Agent motion sampled on the plan time grid, projected onto a path."""

    id: str
    times: np.ndarray
    s: np.ndarray
    lateral: np.ndarray
    speed_along: float
    length: float

    def s_at(self, tau: float) -> float:
        if tau <= self.times[-1]:
            return float(np.interp(tau, self.times, self.s))
        return float(self.s[-1] + self.speed_along * (tau - self.times[-1]))

    def lateral_at(self, tau: float) -> float:
        return float(np.interp(tau, self.times, self.lateral))


@dataclass
class _Obstacle:
    id: str
    s: float
    length: float


@dataclass
class ExpertPlan:
    """Frozen planning context plus the forward-simulated trajectory."""

    policy: "ExpertPolicy"
    route: np.ndarray
    shifted: np.ndarray | None
    route_leads: list
    shifted_leads: list
    stops: list  # (s along route, element id or None, is_stop_sign)
    obstacle: _Obstacle | None
    overtake_go: bool
    trajectory: np.ndarray = field(default=None)
    first_control: ControlCommand = field(default=None)

    def _engaged(self, s_e: float) -> bool:
        ob = self.obstacle
        if ob is None:
            return False
        if ob.id in self.policy.committed:
            return True
        return ob.s - s_e <= self.policy.config.decision_distance

    def control(self, x: float, y: float, h: float, v: float, tau: float, cleared: set, commit: bool = False):
        cfg = self.policy.config
        s_route, _ = project_onto_polyline(self.route, (x, y))
        engaged = self._engaged(s_route)
        use_shift = self.shifted is not None and engaged and (self.overtake_go or self.obstacle.id in self.policy.committed)
        path = self.shifted if use_shift else self.route
        leads = self.shifted_leads if use_shift else self.route_leads
        s_e, _ = project_onto_polyline(path, (x, y)) if use_shift else (s_route, 0.0)
        if commit and use_shift:
            self.policy.committed.add(self.obstacle.id)

        lookahead = min(cfg.lookahead_max, max(cfg.lookahead_min, cfg.lookahead_gain * v))
        target, _ = point_along_polyline(path, s_e + lookahead)
        alpha = math.atan2(target[1] - y, target[0] - x) - h
        delta = math.atan2(2.0 * self.policy.vehicle.wheelbase * math.sin(alpha), lookahead)
        steer = delta / self.policy.vehicle.max_steer_angle

        v0 = self.policy.desired_speed
        accel = cfg.idm_accel * (1.0 - (v / v0) ** 4)
        half = 0.5 * cfg.ego_length
        for tr in leads:
            s_l = tr.s_at(tau)
            if s_l <= s_e or abs(tr.lateral_at(tau)) > 0.5 * cfg.lane_width + 0.3:
                continue
            gap = s_l - s_e - half - 0.5 * tr.length
            accel = min(accel, self._idm(v, v0, gap, v - tr.speed_along, cfg.min_gap))
        ob = self.obstacle
        if ob is not None and not use_shift:
            variant = self.policy.variant
            if variant == "default" or engaged:
                s0 = cfg.static_gap if variant == "default" else cfg.yield_gap
                gap = ob.s - s_route - half - 0.5 * ob.length
                accel = min(accel, self._idm(v, v0, gap, v, s0))
        for s_stop, eid, is_sign in self.stops:
            if is_sign and eid in cleared:
                continue
            gap = s_stop - s_route - half - cfg.stop_margin
            if gap < -0.5:
                continue
            if is_sign and v < 0.1 and gap < 3.0:
                cleared.add(eid)
                continue
            accel = min(accel, self._idm(v, v0, gap, v, 0.5))
        accel = max(-self.policy.vehicle.max_brake, min(self.policy.vehicle.max_accel, accel))
        if v < 0.05 and accel < 0:
            accel = -self.policy.vehicle.max_brake
        return accel_to_command(accel, v, steer, self.policy.vehicle)

    def _idm(self, v, v0, gap, dv, s0) -> float:
        cfg = self.policy.config
        s_star = s0 + max(0.0, v * cfg.time_headway + v * dv / (2.0 * math.sqrt(cfg.idm_accel * cfg.idm_decel)))
        return cfg.idm_accel * (1.0 - (v / v0) ** 4 - (s_star / max(gap, 0.1)) ** 2)


class ExpertPolicy:
    """Demonstrator with a small memory (cleared stop signs, committed overtakes)."""

    needs_route = True

    def __init__(
        self,
        variant: str = "default",
        config: ExpertConfig = ExpertConfig(),
        desired_speed: float | None = None,
        vehicle: VehicleParams = DEFAULT_VEHICLE,
        horizon: int = 6,
        dt_wp: float = 0.5,
        dt: float = 0.05,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown expert variant {variant!r}")
        self.variant = variant
        self.config = config
        self.desired_speed = config.desired_speed if desired_speed is None else desired_speed
        self.vehicle = vehicle
        self.horizon = horizon
        self.dt_wp = dt_wp
        self.dt = dt
        self.cleared: set = set()
        self.committed: set = set()

    def reset(self) -> None:
        self.cleared.clear()
        self.committed.clear()

    # ------------------------------------------------------------------ context

    def _extended_route(self, route: np.ndarray) -> np.ndarray:
        s_e, _ = project_onto_polyline(route, (0.0, 0.0))
        total = cumulative_arclength(route)[-1]
        if s_e >= total - self.config.goal_tolerance:
            raise EpisodeComplete("route exhausted")
        end, h = point_along_polyline(route, total)
        tail = end + 60.0 * np.array([math.cos(h), math.sin(h)])
        s = np.arange(max(0.0, s_e - 10.0), min(total, s_e + 100.0), 1.0)
        pts = np.array([point_along_polyline(route, si)[0] for si in s] + [end, tail])
        keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-6])
        return pts[keep]

    def _tracks(self, snap: SceneSnapshot, path: np.ndarray, times: np.ndarray) -> list[_Track]:
        out = []
        for a in snap.agents:
            poses = np.vstack([[a.pose.x, a.pose.y, a.pose.heading], np.asarray(a.future)])
            proj = np.array([project_onto_polyline(path, p[:2]) for p in poses])
            _, h_path = point_along_polyline(path, proj[0, 0])
            rel = abs(math.remainder(a.pose.heading - h_path, 2 * math.pi))
            if rel > math.pi / 2 and a.speed > 0.5:
                continue  # oncoming traffic is never a lead
            speed_along = (proj[-1, 0] - proj[-2, 0]) / self.dt_wp
            out.append(_Track(a.id, times, proj[:, 0], proj[:, 1], speed_along, a.footprint.length))
        return out

    def plan(self, snap: SceneSnapshot, route) -> ExpertPlan:
        cfg = self.config
        route = self._extended_route(np.asarray(route, dtype=float))
        times = self.dt_wp * np.arange(self.horizon + 1)
        s_e, _ = project_onto_polyline(route, (0.0, 0.0))

        obstacle = None
        for a in snap.agents:
            if a.speed >= 0.1:
                continue
            s_a, lat = project_onto_polyline(route, (a.pose.x, a.pose.y))
            if s_a > s_e and abs(lat) < 0.5 * cfg.lane_width and (obstacle is None or s_a < obstacle.s):
                obstacle = _Obstacle(a.id, s_a, a.footprint.length)

        shifted = None
        overtake_go = False
        if obstacle is not None and self.variant == "overtake":
            shifted = self._shift_path(route, obstacle)
            overtake_go = obstacle.id in self.committed or self._oncoming_clear(snap, route, s_e, obstacle)

        route_leads = [t for t in self._tracks(snap, route, times) if obstacle is None or t.id != obstacle.id]
        shifted_leads = [] if shifted is None else [t for t in self._tracks(snap, shifted, times) if t.id != obstacle.id]

        stops = []
        for e in snap.traffic_elements:
            if not e.affects_ego:
                continue
            s_stop, _ = project_onto_polyline(route, np.asarray(e.stop_line).mean(axis=0))
            if e.kind == "stop_sign":
                stops.append((s_stop, e.id, True))
            elif e.state == "red":
                stops.append((s_stop, e.id, False))
            elif e.state == "yellow":
                gap = s_stop - s_e - 0.5 * cfg.ego_length
                if gap > snap.ego.speed**2 / (2.0 * cfg.idm_decel):
                    stops.append((s_stop, e.id, False))

        plan = ExpertPlan(self, route, shifted, route_leads, shifted_leads, stops, obstacle, overtake_go)
        plan.first_control = plan.control(0.0, 0.0, 0.0, snap.ego.speed, 0.0, self.cleared, commit=True)
        plan.trajectory = self._rollout(plan, snap.ego.speed)
        return plan

    def _shift_window(self, obstacle: _Obstacle) -> tuple[float, float, float, float]:
        """Arclengths where the lateral shift ramps in and back out."""
        half = 0.5 * (obstacle.length + self.config.ego_length)
        in_end = obstacle.s - half - 1.5
        out_start = obstacle.s + half + 3.0
        return in_end - 13.0, in_end, out_start, out_start + 13.0

    def _shift_path(self, route: np.ndarray, obstacle: _Obstacle) -> np.ndarray:
        s = cumulative_arclength(route)
        a, b, c, d = self._shift_window(obstacle)
        offset = np.where(s <= obstacle.s, _smoothstep((s - a) / (b - a)), 1.0 - _smoothstep((s - c) / (d - c)))
        return route + self.config.lane_width * offset[:, None] * _left_normals(route)

    def _oncoming_clear(self, snap: SceneSnapshot, route: np.ndarray, s_e: float, obstacle: _Obstacle) -> bool:
        cfg = self.config
        clear_s = self._shift_window(obstacle)[3]
        t_ego = (clear_s - s_e) / max(self.desired_speed, 1.0)
        for a in snap.agents:
            s_a, _ = project_onto_polyline(route, (a.pose.x, a.pose.y))
            _, h_path = point_along_polyline(route, s_a)
            if abs(math.remainder(a.pose.heading - h_path, 2 * math.pi)) <= math.pi / 2 or a.speed < 0.5:
                continue
            if s_a < s_e - 5.0:
                continue
            t_on = (s_a - clear_s) / a.speed
            if t_on < t_ego + cfg.overtake_margin:
                return False
        return True

    def _rollout(self, plan: ExpertPlan, v0: float) -> np.ndarray:
        state = EgoState(Pose2(0.0, 0.0, 0.0), v0, self.vehicle.wheelbase)
        cleared = set(self.cleared)
        steps_per_wp = int(round(self.dt_wp / self.dt))
        out = np.empty((self.horizon, 2))
        for k in range(1, self.horizon * steps_per_wp + 1):
            tau = (k - 1) * self.dt
            c = plan.first_control if k == 1 else plan.control(state.pose.x, state.pose.y, state.pose.heading, state.speed, tau, cleared)
            state = bicycle_step(state, c, self.dt, self.vehicle)
            if k % steps_per_wp == 0:
                out[k // steps_per_wp - 1] = (state.pose.x, state.pose.y)
        return out

    def __call__(self, snap: SceneSnapshot, route) -> tuple[np.ndarray, ControlCommand]:
        plan = self.plan(snap, route)
        return plan.trajectory, plan.first_control


def expert_policy(s: SceneSnapshot, route, variant: str = "default", **kwargs) -> tuple[np.ndarray, ControlCommand]:
    """Stateless convenience wrapper returning ``(trajectory, control)``."""
    return ExpertPolicy(variant, **kwargs)(s, route)
