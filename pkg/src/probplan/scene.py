"""Driving-scene data model, scenario files, and embedding of ground truth into tokens.

A :class:`SceneSnapshot` is everything the planner sees at one tick, already
expressed in the ego frame. :func:`featurize` flattens it into fixed-width
numpy rows per token group; :func:`embed_batch` turns those rows into the
environment tokens, navigation embedding and ego-state embedding through
small per-group perceptrons.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import jsonschema
import numpy as np
import torch

from .exceptions import FormatError, ValidationError
from .geometry import POLYLINE_KINDS, Footprint, Polyline, Pose2, resample_polyline
from .nn import ParamStore, mlp2

COMMANDS = ("follow", "left", "right", "straight", "change_left", "change_right")
TRAFFIC_KINDS = ("traffic_light", "stop_sign")
TRAFFIC_STATES = ("red", "yellow", "green", "n/a")
AGENT_KINDS = ("vehicle", "static")
BEHAVIOR_KINDS = ("stationary", "constant_speed", "lane_follow", "scripted_waypoints")
TOKEN_GROUPS = ("map", "agent", "traffic", "navi", "state")

POLYLINE_POINTS = 20
MAX_AGENTS = 16
MAX_TRAFFIC = 4
MAX_POLYLINES = 32
# coordinates are divided by this before entering the perceptrons
POS_SCALE = 20.0
SPEED_SCALE = 10.0


@dataclass(frozen=True)
class ControlCommand:
    """Actuator command. Ranges are clamped; a positive brake zeroes the throttle."""

    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self):
        steer = min(1.0, max(-1.0, float(self.steer)))
        throttle = min(1.0, max(0.0, float(self.throttle)))
        brake = min(1.0, max(0.0, float(self.brake)))
        if brake > 0.0:
            throttle = 0.0
        object.__setattr__(self, "steer", steer)
        object.__setattr__(self, "throttle", throttle)
        object.__setattr__(self, "brake", brake)

    def as_list(self) -> list[float]:
        return [self.steer, self.throttle, self.brake]


@dataclass
class AgentObservation:
    id: str
    pose: Pose2
    footprint: Footprint
    speed: float
    future: np.ndarray  # (T, 3) x, y, heading on the planning time grid
    kind: str = "vehicle"


@dataclass
class TrafficElementObservation:
    id: str
    kind: str
    state: str
    affects_ego: bool
    stop_line: np.ndarray  # (2, 2)


@dataclass
class EgoObservation:
    speed: float = 0.0
    yaw_rate: float = 0.0
    last_control: ControlCommand = field(default_factory=ControlCommand)


@dataclass
class Navigation:
    command: str = "follow"
    target: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass
class SceneSnapshot:
    """Ground-truth scene at one tick, in the ego frame."""

    map: list[Polyline]
    agents: list[AgentObservation] = field(default_factory=list)
    traffic_elements: list[TrafficElementObservation] = field(default_factory=list)
    ego: EgoObservation = field(default_factory=EgoObservation)
    navigation: Navigation = field(default_factory=Navigation)
    frame_id: str = ""

    def validate(self, horizon: int | None = None) -> "SceneSnapshot":
        if not any(p.kind == "road_boundary" for p in self.map):
            raise ValidationError(f"snapshot {self.frame_id!r} has no road boundary")
        for a in self.agents:
            if horizon is not None and np.shape(a.future) != (horizon, 3):
                raise ValidationError(f"agent {a.id} future shape {np.shape(a.future)} != ({horizon}, 3)")
        for e in self.traffic_elements:
            if e.kind not in TRAFFIC_KINDS or e.state not in TRAFFIC_STATES:
                raise ValidationError(f"bad traffic element {e.kind}/{e.state}")
        if self.navigation.command not in COMMANDS:
            raise ValidationError(f"unknown navigation command {self.navigation.command!r}")
        return self

    @property
    def boundaries(self) -> list[Polyline]:
        return [p for p in self.map if p.kind == "road_boundary"]

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "map": [{"kind": p.kind, "points": p.points.tolist()} for p in self.map],
            "agents": [
                {
                    "id": a.id,
                    "pose": [a.pose.x, a.pose.y, a.pose.heading],
                    "footprint": [a.footprint.length, a.footprint.width],
                    "speed": a.speed,
                    "future": np.asarray(a.future).tolist(),
                    "kind": a.kind,
                }
                for a in self.agents
            ],
            "traffic_elements": [
                {
                    "id": e.id,
                    "kind": e.kind,
                    "state": e.state,
                    "affects_ego": e.affects_ego,
                    "stop_line": np.asarray(e.stop_line).tolist(),
                }
                for e in self.traffic_elements
            ],
            "ego": {
                "speed": self.ego.speed,
                "yaw_rate": self.ego.yaw_rate,
                "last_control": self.ego.last_control.as_list(),
            },
            "navigation": {"command": self.navigation.command, "target": list(map(float, self.navigation.target))},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSnapshot":
        return cls(
            map=[Polyline(np.array(p["points"], dtype=float), p["kind"]) for p in d["map"]],
            agents=[
                AgentObservation(
                    id=a["id"],
                    pose=Pose2(*a["pose"]),
                    footprint=Footprint(*a["footprint"]),
                    speed=float(a["speed"]),
                    future=np.array(a["future"], dtype=float),
                    kind=a.get("kind", "vehicle"),
                )
                for a in d["agents"]
            ],
            traffic_elements=[
                TrafficElementObservation(
                    id=e["id"],
                    kind=e["kind"],
                    state=e["state"],
                    affects_ego=bool(e["affects_ego"]),
                    stop_line=np.array(e["stop_line"], dtype=float),
                )
                for e in d["traffic_elements"]
            ],
            ego=EgoObservation(
                speed=float(d["ego"]["speed"]),
                yaw_rate=float(d["ego"]["yaw_rate"]),
                last_control=ControlCommand(*d["ego"]["last_control"]),
            ),
            navigation=Navigation(d["navigation"]["command"], np.array(d["navigation"]["target"], dtype=float)),
            frame_id=d.get("frame_id", ""),
        )


# --------------------------------------------------------------------------- scenario files


@dataclass
class AgentSpec:
    id: str
    start_pose: Pose2
    footprint: Footprint
    behavior: str
    params: dict
    kind: str = "vehicle"


@dataclass
class TrafficElementSpec:
    id: str
    kind: str
    stop_line: np.ndarray
    affects_ego: bool = True
    # (start_time, state) pairs for lights; stop signs use "n/a"
    program: list = field(default_factory=list)

    def state_at(self, t: float) -> str:
        if self.kind == "stop_sign":
            return "n/a"
        state = self.program[0][1] if self.program else "green"
        for start, s in self.program:
            if t >= start:
                state = s
        return state


@dataclass
class ScenarioSpec:
    name: str
    map: list[Polyline]
    route: np.ndarray
    agents: list[AgentSpec]
    traffic_elements: list[TrafficElementSpec]
    ego_start: Pose2
    ego_speed: float
    episode_seconds: float
    expert: dict = field(default_factory=dict)

    @property
    def boundaries(self) -> list[Polyline]:
        return [p for p in self.map if p.kind == "road_boundary"]

    @property
    def expert_variants(self) -> list[str]:
        return list(self.expert.get("variants", ["default"]))

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "map": [{"kind": p.kind, "points": p.points.tolist()} for p in self.map],
            "route": self.route.tolist(),
            "agents": [
                {
                    "id": a.id,
                    "kind": a.kind,
                    "start_pose": [a.start_pose.x, a.start_pose.y, a.start_pose.heading],
                    "footprint": [a.footprint.length, a.footprint.width],
                    "behavior": {"kind": a.behavior, "params": a.params},
                }
                for a in self.agents
            ],
            "traffic_elements": [
                {
                    "id": e.id,
                    "kind": e.kind,
                    "stop_line": np.asarray(e.stop_line).tolist(),
                    "affects_ego": e.affects_ego,
                    "program": [list(p) for p in e.program],
                }
                for e in self.traffic_elements
            ],
            "ego_start": {
                "pose": [self.ego_start.x, self.ego_start.y, self.ego_start.heading],
                "speed": self.ego_speed,
            },
            "episode_seconds": self.episode_seconds,
        }
        if self.expert:
            out["expert"] = self.expert
        return out


def scenario_schema() -> dict:
    return json.loads(resources.files("probplan").joinpath("scenarios/schema.json").read_text())


def _finite(obj, path="$"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise FormatError(f"non-finite number at {path}")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _finite(v, f"{path}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _finite(v, f"{path}[{i}]")


def parse_scenario(data: Mapping, name: str | None = None) -> ScenarioSpec:
    """Validate a decoded scenario document and build a :class:`ScenarioSpec`."""
    _finite(data)
    try:
        jsonschema.validate(data, scenario_schema())
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise FormatError(f"scenario field {where}: {err.message}") from None
    try:
        polylines = [Polyline(np.array(p["points"], dtype=float), p["kind"]) for p in data["map"]]
    except ValidationError as err:
        raise FormatError(f"scenario map: {err}") from None
    if not any(p.kind == "road_boundary" for p in polylines):
        raise ValidationError("scenario has no road_boundary polyline")
    agents = [
        AgentSpec(
            id=a["id"],
            start_pose=Pose2(*a["start_pose"]),
            footprint=Footprint(*a.get("footprint", [4.6, 1.9])),
            behavior=a["behavior"]["kind"],
            params=dict(a["behavior"].get("params", {})),
            kind=a.get("kind", "vehicle"),
        )
        for a in data.get("agents", [])
    ]
    elements = [
        TrafficElementSpec(
            id=e["id"],
            kind=e["kind"],
            stop_line=np.array(e["stop_line"], dtype=float),
            affects_ego=bool(e.get("affects_ego", True)),
            program=[(float(t), s) for t, s in e.get("program", [])],
        )
        for e in data.get("traffic_elements", [])
    ]
    ego = data["ego_start"]
    return ScenarioSpec(
        name=data.get("name", name or "scenario"),
        map=polylines,
        route=np.array(data["route"], dtype=float),
        agents=agents,
        traffic_elements=elements,
        ego_start=Pose2(*ego["pose"]),
        ego_speed=float(ego.get("speed", 0.0)),
        episode_seconds=float(data["episode_seconds"]),
        expert=dict(data.get("expert", {})),
    )


def load_scenario(path) -> ScenarioSpec:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON: {err.msg}", offset=err.pos) from None
    return parse_scenario(data, name=str(path))


def save_scenario(spec: ScenarioSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)


def bundled_scenario_names() -> list[str]:
    root = resources.files("probplan").joinpath("scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json") and p.name != "schema.json")


def load_bundled_scenario(name: str) -> ScenarioSpec:
    text = resources.files("probplan").joinpath(f"scenarios/{name}.json").read_text()
    return parse_scenario(json.loads(text), name=name)


# --------------------------------------------------------------------------- featurization


def _one_hot(value, choices) -> list[float]:
    return [1.0 if value == c else 0.0 for c in choices]


MAP_FEATURES = 2 * POLYLINE_POINTS + len(POLYLINE_KINDS)
AGENT_FEATURES_BASE = 8


def agent_feature_width(horizon: int) -> int:
    return AGENT_FEATURES_BASE + 4 * horizon


TRAFFIC_FEATURES = len(TRAFFIC_KINDS) + len(TRAFFIC_STATES) + 1 + 4
NAVI_FEATURES = len(COMMANDS) + 2
STATE_FEATURES = 5


@dataclass
class SceneFeatures:
    """Fixed-width per-group feature rows for one snapshot."""

    map: np.ndarray
    agents: np.ndarray
    traffic: np.ndarray
    navi: np.ndarray
    state: np.ndarray
    frame_id: str = ""


def map_features(polylines: Sequence[Polyline]) -> np.ndarray:
    rows = []
    for p in list(polylines)[:MAX_POLYLINES]:
        pts = resample_polyline(p.points, POLYLINE_POINTS) / POS_SCALE
        rows.append(np.concatenate([pts.ravel(), _one_hot(p.kind, POLYLINE_KINDS)]))
    return np.array(rows, dtype=float).reshape(-1, MAP_FEATURES)


def featurize(s: SceneSnapshot, horizon: int) -> SceneFeatures:
    agents = sorted(s.agents, key=lambda a: math.hypot(a.pose.x, a.pose.y))[:MAX_AGENTS]
    agent_rows = []
    for a in agents:
        fut = np.asarray(a.future, dtype=float)
        fut_feat = np.stack(
            [fut[:, 0] / POS_SCALE, fut[:, 1] / POS_SCALE, np.cos(fut[:, 2]), np.sin(fut[:, 2])], axis=-1
        )
        agent_rows.append(
            np.concatenate(
                [
                    [
                        a.pose.x / POS_SCALE,
                        a.pose.y / POS_SCALE,
                        math.cos(a.pose.heading),
                        math.sin(a.pose.heading),
                        a.footprint.length / 5.0,
                        a.footprint.width / 5.0,
                        a.speed / SPEED_SCALE,
                        1.0 if a.kind == "static" else 0.0,
                    ],
                    fut_feat.ravel(),
                ]
            )
        )
    traffic_rows = []
    for e in s.traffic_elements[:MAX_TRAFFIC]:
        traffic_rows.append(
            _one_hot(e.kind, TRAFFIC_KINDS)
            + _one_hot(e.state, TRAFFIC_STATES)
            + [1.0 if e.affects_ego else 0.0]
            + list(np.asarray(e.stop_line, dtype=float).ravel() / POS_SCALE)
        )
    nav = s.navigation
    ctrl = s.ego.last_control
    return SceneFeatures(
        map=map_features(s.map),
        agents=np.array(agent_rows, dtype=float).reshape(-1, agent_feature_width(horizon)),
        traffic=np.array(traffic_rows, dtype=float).reshape(-1, TRAFFIC_FEATURES),
        navi=np.array(_one_hot(nav.command, COMMANDS) + list(np.asarray(nav.target, dtype=float) / POS_SCALE)),
        state=np.array([s.ego.speed / SPEED_SCALE, s.ego.yaw_rate, ctrl.steer, ctrl.throttle, ctrl.brake]),
        frame_id=s.frame_id,
    )


# --------------------------------------------------------------------------- embedding


def add_encoder_params(store: ParamStore, d: int, horizon: int) -> None:
    store.add_mlp2("enc.map", MAP_FEATURES, d, d)
    store.add_mlp2("enc.agent", agent_feature_width(horizon), d, d)
    store.add_mlp2("enc.traffic", TRAFFIC_FEATURES, d, d)
    store.add_mlp2("enc.navi", NAVI_FEATURES, d, d)
    store.add_mlp2("enc.state", STATE_FEATURES, d, d)


@dataclass
class EnvTokenSet:
    """Embedded scene for a batch: tokens ``(B, M, d)`` with validity mask ``(B, M)``.

    ``groups`` names the token group of each column of ``env_tokens``.
    """

    env_tokens: torch.Tensor
    mask: torch.Tensor
    navi_embedding: torch.Tensor
    state_embedding: torch.Tensor
    groups: tuple[str, ...]

    @property
    def n_tokens(self) -> torch.Tensor:
        return self.mask.sum(dim=-1)


def _pad_stack(rows: Sequence[np.ndarray], width: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    n = max((len(r) for r in rows), default=0)
    out = np.zeros((len(rows), n, width))
    mask = np.zeros((len(rows), n), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return torch.from_numpy(out).to(dtype), torch.from_numpy(mask)


@dataclass
class FeatureBatch:
    map: torch.Tensor
    map_mask: torch.Tensor
    agents: torch.Tensor
    agent_mask: torch.Tensor
    traffic: torch.Tensor
    traffic_mask: torch.Tensor
    navi: torch.Tensor
    state: torch.Tensor
    frame_ids: tuple[str, ...]


def collate(features: Sequence[SceneFeatures], horizon: int, dtype=torch.float32) -> FeatureBatch:
    m, mm = _pad_stack([f.map for f in features], MAP_FEATURES, dtype)
    a, am = _pad_stack([f.agents for f in features], agent_feature_width(horizon), dtype)
    t, tm = _pad_stack([f.traffic for f in features], TRAFFIC_FEATURES, dtype)
    return FeatureBatch(
        map=m,
        map_mask=mm,
        agents=a,
        agent_mask=am,
        traffic=t,
        traffic_mask=tm,
        navi=torch.from_numpy(np.stack([f.navi for f in features])).to(dtype),
        state=torch.from_numpy(np.stack([f.state for f in features])).to(dtype),
        frame_ids=tuple(f.frame_id for f in features),
    )


def embed_batch(batch: FeatureBatch, params: Mapping[str, torch.Tensor], ablate: Sequence[str] = ()) -> EnvTokenSet:
    """Embed a collated batch. Groups named in ``ablate`` are replaced by zero vectors."""
    unknown = set(ablate) - set(TOKEN_GROUPS)
    if unknown:
        raise ValidationError(f"unknown token groups {sorted(unknown)}")
    tokens, masks, groups = [], [], []
    for name, x, mask in (
        ("map", batch.map, batch.map_mask),
        ("agent", batch.agents, batch.agent_mask),
        ("traffic", batch.traffic, batch.traffic_mask),
    ):
        if x.shape[1] == 0:
            continue
        emb = mlp2(x, params, f"enc.{name}")
        if name in ablate:
            emb = torch.zeros_like(emb)
        tokens.append(emb)
        masks.append(mask)
        groups.extend([name] * x.shape[1])
    navi = mlp2(batch.navi, params, "enc.navi")
    state = mlp2(batch.state, params, "enc.state")
    if "navi" in ablate:
        navi = torch.zeros_like(navi)
    if "state" in ablate:
        state = torch.zeros_like(state)
    return EnvTokenSet(
        env_tokens=torch.cat(tokens, dim=1),
        mask=torch.cat(masks, dim=1),
        navi_embedding=navi,
        state_embedding=state,
        groups=tuple(groups),
    )


def embed_scene(
    s: SceneSnapshot,
    params: Mapping[str, torch.Tensor],
    horizon: int,
    ablate: Sequence[str] = (),
    dtype=None,
) -> EnvTokenSet:
    """Embed one snapshot; the returned tensors keep a leading batch axis of 1.

    ``dtype`` defaults to the dtype of the parameters.
    """
    s.validate(horizon)
    if dtype is None:
        dtype = params["enc.map.w1"].dtype
    return embed_batch(collate([featurize(s, horizon)], horizon, dtype), params, ablate)
