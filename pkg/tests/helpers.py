"""Small scene builders shared by the unit tests."""
from __future__ import annotations

import numpy as np

from probplan.geometry import Footprint, Polyline, Pose2
from probplan.scene import (
    AgentObservation,
    EgoObservation,
    Navigation,
    SceneSnapshot,
    TrafficElementObservation,
    parse_scenario,
)


def corridor(half_width: float = 3.5, x0: float = -20.0, x1: float = 80.0) -> list[Polyline]:
    return [
        Polyline(np.array([[x0, half_width], [x1, half_width]]), "road_boundary"),
        Polyline(np.array([[x0, -half_width], [x1, -half_width]]), "road_boundary"),
        Polyline(np.array([[x0, 0.0], [x1, 0.0]]), "lane_centerline"),
    ]


def stationary_agent(x: float, y: float = 0.0, T: int = 6, fp: Footprint = Footprint(), aid: str = "a0") -> AgentObservation:
    return AgentObservation(aid, Pose2(x, y, 0.0), fp, 0.0, np.tile([x, y, 0.0], (T, 1)), kind="vehicle")


def straight(speed: float, T: int = 6, dt: float = 0.5, y: float = 0.0) -> np.ndarray:
    t = dt * np.arange(1, T + 1)
    return np.stack([speed * t, np.full(T, y)], axis=-1)


def snapshot(agents=(), elements=(), speed: float = 5.0, half_width: float = 3.5, frame_id: str = "test/0/0") -> SceneSnapshot:
    return SceneSnapshot(
        map=corridor(half_width),
        agents=list(agents),
        traffic_elements=list(elements),
        ego=EgoObservation(speed=speed),
        navigation=Navigation("follow", np.array([20.0, 0.0])),
        frame_id=frame_id,
    )


def light(x: float, state: str = "red", half: float = 3.5, kind: str = "traffic_light", eid: str = "L") -> TrafficElementObservation:
    return TrafficElementObservation(eid, kind, state if kind == "traffic_light" else "n/a", True, np.array([[x, -half], [x, half]]))


def random_snapshot(rng: np.random.Generator, T: int = 6) -> SceneSnapshot:
    half = rng.uniform(2.0, 6.0)
    agents = []
    for i in range(int(rng.integers(0, 5))):
        x, y, h = rng.uniform(-10, 50), rng.uniform(-half, half), rng.uniform(-np.pi, np.pi)
        v = rng.uniform(0, 10)
        t = 0.5 * np.arange(1, T + 1)
        fut = np.stack([x + v * t * np.cos(h), y + v * t * np.sin(h), np.full(T, h)], axis=-1)
        agents.append(AgentObservation(f"a{i}", Pose2(x, y, h), Footprint(rng.uniform(2, 6), rng.uniform(1, 2.5)), v, fut))
    elements = []
    if rng.random() < 0.5:
        state = str(rng.choice(["red", "yellow", "green"]))
        elements.append(light(rng.uniform(5, 40), state, half))
    return SceneSnapshot(
        map=corridor(half),
        agents=agents,
        traffic_elements=elements,
        ego=EgoObservation(speed=rng.uniform(0, 12), yaw_rate=rng.uniform(-0.3, 0.3)),
        navigation=Navigation(str(rng.choice(["follow", "left", "straight"])), rng.uniform(-5, 30, size=2)),
        frame_id=f"random/{rng.integers(1 << 30)}",
    )


def scenario_doc(agents=(), elements=(), route_end: float = 120.0, seconds: float = 20.0, speed: float = 8.0, half: float = 3.5) -> dict:
    return {
        "name": "unit",
        "map": [
            {"kind": "road_boundary", "points": [[-20.0, half], [route_end + 30.0, half]]},
            {"kind": "road_boundary", "points": [[-20.0, -half], [route_end + 30.0, -half]]},
            {"kind": "lane_centerline", "points": [[-20.0, 0.0], [route_end + 30.0, 0.0]]},
        ],
        "route": [[0.0, 0.0], [route_end, 0.0]],
        "agents": list(agents),
        "traffic_elements": list(elements),
        "ego_start": {"pose": [0.0, 0.0, 0.0], "speed": speed},
        "episode_seconds": seconds,
    }


def scenario(**kwargs):
    return parse_scenario(scenario_doc(**kwargs))


def track_line(offset: float = 0.0, speed: float = 10.0, v0: float = 10.0, seconds: float = 10.0, dt: float = 0.05):
    """Closed-loop PID + bicycle run following the world line y = 0 at ``speed``.

    The ego starts at (0, offset) heading along +x and replans at 2 Hz exactly
    as the simulator does. Returns per-tick arrays ``(t, lateral_error, speed)``.
    """
    from probplan.geometry import to_local
    from probplan.sim.control import EgoState, bicycle_step
    from probplan.sim.episode import PlanDecision, TrackingPolicy

    policy = TrackingPolicy()
    state = EgoState(Pose2(0.0, offset, 0.0), v0)
    every = int(round(0.5 / dt))
    ts, lat, v = [], [], []
    for tick in range(int(round(seconds / dt))):
        if tick % every == 0:
            origin = state.as_array()
            x0 = state.pose.x
            world = np.stack([x0 + speed * 0.5 * np.arange(1, 7), np.zeros(6)], axis=-1)
            decision = PlanDecision(to_local(world, origin))
        local = to_local(state.as_array()[None, :2], origin)[0]
        h = state.pose.heading - origin[2]
        c = policy.act(decision, (local[0], local[1], h), state.speed, dt, (tick % every) * dt)
        state = bicycle_step(state, c, dt)
        ts.append((tick + 1) * dt)
        lat.append(state.pose.y)
        v.append(state.speed)
    return np.array(ts), np.abs(np.array(lat)), np.array(v)


def fit_circle(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares (Kasa) circle fit; returns ``(center, radius)``."""
    x, y = points[:, 0], points[:, 1]
    A = np.stack([x, y, np.ones_like(x)], axis=-1)
    b = x**2 + y**2
    (cx2, cy2, c), *_ = np.linalg.lstsq(A, b, rcond=None)
    center = np.array([cx2 / 2, cy2 / 2])
    return center, float(np.sqrt(c + center @ center))
