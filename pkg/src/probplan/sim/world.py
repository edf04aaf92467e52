"""Scenario runtime: scripted agents, traffic programs and ego-frame snapshots."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import (
    Polyline,
    Pose2,
    cumulative_arclength,
    normalize_angle,
    point_along_polyline,
    poses_to_local,
    project_onto_polyline,
    to_local,
)
from ..scene import (
    AgentObservation,
    AgentSpec,
    ControlCommand,
    EgoObservation,
    Navigation,
    SceneSnapshot,
    ScenarioSpec,
    TrafficElementObservation,
)
from .control import EgoState

PERCEPTION_BACK = 20.0
PERCEPTION_FRONT = 60.0
PERCEPTION_SIDE = 30.0
NAV_LOOKAHEAD = 15.0
GOAL_TOLERANCE = 2.0


@dataclass(frozen=True)
class Perturbation:
    """Per-seed jitter of initial conditions, so demonstrations include recoveries."""

    ego_lateral: float = 0.4
    ego_heading: float = 0.04
    ego_speed: float = 0.5
    agent_longitudinal: float = 1.5
    agent_speed_frac: float = 0.05
    desired_speed: float = 0.5


NO_PERTURBATION = Perturbation(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


class ScriptedAgent:
    """Deterministic agent motion as a function of time."""

    def __init__(self, spec: AgentSpec, shift: float = 0.0, speed_scale: float = 1.0):
        self.spec = spec
        self.id = spec.id
        self.footprint = spec.footprint
        self.kind = spec.kind
        p = spec.params
        kind = spec.behavior
        h = spec.start_pose.heading
        x0 = spec.start_pose.x + shift * math.cos(h)
        y0 = spec.start_pose.y + shift * math.sin(h)
        if kind == "stationary":
            self._path = None
            self._fixed = (x0, y0, h)
        elif kind in ("constant_speed", "lane_follow"):
            if kind == "lane_follow":
                path = np.asarray(p["path"], dtype=float)
            else:
                path = np.array([[x0, y0], [x0 + math.cos(h), y0 + math.sin(h)]])
            self._path = path
            self._s0, _ = project_onto_polyline(path, [x0, y0]) if kind == "lane_follow" else (0.0, 0.0)
            self._speed = float(p.get("speed", 0.0)) * speed_scale
        elif kind == "scripted_waypoints":
            wps = np.asarray(p["waypoints"], dtype=float)
            self._times = wps[:, 0] * (1.0 / speed_scale if speed_scale > 0 else 1.0)
            self._xy = wps[:, 1:3] + shift * np.array([math.cos(h), math.sin(h)])
            self._heading0 = h
        else:  # pragma: no cover - rejected by the schema
            raise ValueError(kind)

    def state(self, t: float) -> tuple[float, float, float, float]:
        """``(x, y, heading, speed)`` at time ``t``."""
        kind = self.spec.behavior
        if kind == "stationary":
            x, y, h = self._fixed
            return x, y, h, 0.0
        if kind in ("constant_speed", "lane_follow"):
            pos, h = point_along_polyline(self._path, self._s0 + self._speed * t)
            return float(pos[0]), float(pos[1]), h, self._speed
        times, xy = self._times, self._xy
        x = float(np.interp(t, times, xy[:, 0]))
        y = float(np.interp(t, times, xy[:, 1]))
        i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        seg = xy[i + 1] - xy[i]
        dtm = times[i + 1] - times[i]
        speed = float(np.linalg.norm(seg) / dtm) if dtm > 0 and t < times[-1] else 0.0
        h = self._heading_before(i)
        return x, y, h, speed

    def _heading_before(self, i: int) -> float:
        h = self._heading0
        for j in range(i + 1):
            seg = self._xy[j + 1] - self._xy[j]
            if np.linalg.norm(seg) > 1e-6:
                h = math.atan2(seg[1], seg[0])
        return h


def _densify(points: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Insert points every ``spacing`` metres along each segment, keeping the vertices."""
    out = []
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
        out.append(a + (b - a) * (np.arange(n) / n)[:, None])
    out.append(points[-1:])
    return np.vstack(out)


class World:
    """Runtime for one scenario and seed."""

    def __init__(
        self,
        spec: ScenarioSpec,
        seed: int = 0,
        horizon: int = 6,
        dt_wp: float = 0.5,
        perturbation: Perturbation = Perturbation(),
    ):
        self.spec = spec
        self.seed = seed
        self.horizon = horizon
        self.dt_wp = dt_wp
        rng = np.random.default_rng(seed)
        pt = perturbation
        u = lambda scale: float(rng.uniform(-scale, scale)) if scale > 0 else 0.0  # noqa: E731
        self.agents = [ScriptedAgent(a, shift=u(pt.agent_longitudinal), speed_scale=1.0 + u(pt.agent_speed_frac)) for a in spec.agents]
        lat, dh, dv = u(pt.ego_lateral), u(pt.ego_heading), u(pt.ego_speed)
        p0 = spec.ego_start
        self.ego_start = EgoState(
            Pose2(p0.x - lat * math.sin(p0.heading), p0.y + lat * math.cos(p0.heading), p0.heading + dh),
            max(0.0, spec.ego_speed + dv),
        )
        self.desired_speed = float(spec.expert.get("desired_speed", 8.0)) + u(pt.desired_speed)
        self.route = np.asarray(spec.route, dtype=float)
        self.route_length = float(cumulative_arclength(self.route)[-1])
        self._dense_map = [(p.kind, _densify(p.points)) for p in spec.map]
        self.boundaries = spec.boundaries

    # ----------------------------------------------------------------- queries

    def agent_states(self, t: float) -> list[tuple[ScriptedAgent, tuple[float, float, float, float]]]:
        return [(a, a.state(t)) for a in self.agents]

    def light_state(self, element, t: float) -> str:
        return element.state_at(t)

    def route_progress(self, xy) -> float:
        s, _ = project_onto_polyline(self.route, xy)
        return s

    def route_in_ego(self, ego: EgoState) -> np.ndarray:
        return to_local(self.route, ego.as_array())

    def navigation(self, ego: EgoState, t: float) -> Navigation:
        origin = ego.as_array()
        s, _ = project_onto_polyline(self.route, origin[:2])
        target_w, _ = point_along_polyline(self.route, s + NAV_LOOKAHEAD)
        target = to_local(target_w, origin)
        _, h_now = point_along_polyline(self.route, s)
        far, h_far = point_along_polyline(self.route, s + 30.0)
        here, _ = point_along_polyline(self.route, s)
        turn = normalize_angle(h_far - h_now)
        shift = to_local(far, (here[0], here[1], h_now))[1]
        if turn > 0.5:
            command = "left"
        elif turn < -0.5:
            command = "right"
        elif shift > 2.0:
            command = "change_left"
        elif shift < -2.0:
            command = "change_right"
        elif any(self._stop_line_ahead(e, origin) for e in self.spec.traffic_elements if e.affects_ego):
            command = "straight"
        else:
            command = "follow"
        return Navigation(command, target)

    def _stop_line_ahead(self, element, origin, reach: float = 30.0) -> bool:
        mid = to_local(np.asarray(element.stop_line).mean(axis=0), origin)
        return 0.0 < mid[0] < reach and abs(mid[1]) < 10.0

    def snapshot(
        self,
        t: float,
        ego: EgoState,
        last_control: ControlCommand = ControlCommand(),
        yaw_rate: float = 0.0,
        frame_id: str = "",
    ) -> SceneSnapshot:
        origin = ego.as_array()
        polylines = []
        for kind, dense in self._dense_map:
            local = to_local(dense, origin)
            inside = (
                (local[:, 0] >= -PERCEPTION_BACK)
                & (local[:, 0] <= PERCEPTION_FRONT)
                & (np.abs(local[:, 1]) <= PERCEPTION_SIDE)
            )
            for run in _runs(inside):
                if len(run) >= 2:
                    polylines.append(Polyline(local[run], kind))
        agents = []
        times = t + self.dt_wp * np.arange(1, self.horizon + 1)
        for a in self.agents:
            x, y, h, v = a.state(t)
            rel = to_local(np.array([x, y]), origin)
            if not (-PERCEPTION_BACK <= rel[0] <= PERCEPTION_FRONT and abs(rel[1]) <= PERCEPTION_SIDE):
                continue
            fut = np.array([a.state(tt)[:3] for tt in times])
            agents.append(
                AgentObservation(
                    id=a.id,
                    pose=Pose2(rel[0], rel[1], normalize_angle(h - origin[2])),
                    footprint=a.footprint,
                    speed=v,
                    future=poses_to_local(fut, origin),
                    kind=a.kind,
                )
            )
        elements = []
        for e in self.spec.traffic_elements:
            line = to_local(np.asarray(e.stop_line, dtype=float), origin)
            mid = line.mean(axis=0)
            if -PERCEPTION_BACK <= mid[0] <= PERCEPTION_FRONT and abs(mid[1]) <= PERCEPTION_SIDE:
                elements.append(TrafficElementObservation(e.id, e.kind, e.state_at(t), e.affects_ego, line))
        return SceneSnapshot(
            map=polylines,
            agents=agents,
            traffic_elements=elements,
            ego=EgoObservation(ego.speed, yaw_rate, last_control),
            navigation=self.navigation(ego, t),
            frame_id=frame_id,
        )


def _runs(mask: np.ndarray) -> list[np.ndarray]:
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1) + 1
    return np.split(idx, breaks)
