"""Infraction detection and the route-completion / infraction / driving scores."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..exceptions import ConfigError
from ..geometry import (
    DEFAULT_FOOTPRINT,
    Footprint,
    Pose2,
    agents_conflict_mask,
    footprints_overlap,
    poses_hit_segments,
)

DEFAULT_PENALTIES = {
    "collision_vehicle": 0.60,
    "collision_static": 0.65,
    "red_light": 0.70,
    "stop_sign": 0.80,
}
# offroad never scales the infraction score; its extent is removed from route completion
INFRACTION_KINDS = tuple(DEFAULT_PENALTIES) + ("offroad",)
STOP_SPEED = 0.1
STOP_ZONE = 5.0


@dataclass(frozen=True)
class InfractionEvent:
    kind: str
    tick: int
    object_id: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tick": self.tick, "object_id": self.object_id}


@dataclass(frozen=True)
class EpisodeScore:
    route_completion: float
    infraction_score: float
    driving_score: float


def resolve_penalties(penalties: Mapping[str, float] | None = None) -> dict[str, float]:
    out = dict(DEFAULT_PENALTIES)
    for kind, value in (penalties or {}).items():
        if kind not in DEFAULT_PENALTIES:
            raise ConfigError(f"no penalty coefficient applies to infraction kind {kind!r}")
        if not 0.0 <= float(value) <= 1.0:
            raise ConfigError(f"penalty for {kind} must lie in [0, 1], got {value}")
        out[kind] = float(value)
    return out


def score_episode(
    events: Iterable,
    fraction: float,
    penalties: Mapping[str, float] | None = None,
    offroad_fraction: float = 0.0,
) -> EpisodeScore:
    """Combine events and route progress into RC (0-100), IS (0-1) and DS (0-100).

    ``events`` may hold :class:`InfractionEvent` objects or bare kind strings.
    ``offroad_fraction`` is the share of the route driven while off the road.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"route fraction must lie in [0, 1], got {fraction}")
    coeffs = resolve_penalties(penalties)
    score = 1.0
    for ev in events:
        kind = ev if isinstance(ev, str) else ev.kind
        if kind == "offroad":
            continue
        if kind not in coeffs:
            raise ConfigError(f"unknown infraction kind {kind!r}")
        score *= coeffs[kind]
    rc = 100.0 * max(0.0, fraction - max(0.0, offroad_fraction))
    return EpisodeScore(rc, score, rc * score)


class InfractionDetector:
    """Per-episode detector; every (kind, object) pair fires at most once.

    Detection depends only on the trace, never on the penalty table.
    """

    def __init__(self, world, footprint: Footprint = DEFAULT_FOOTPRINT):
        self.world = world
        self.footprint = footprint
        self.fired: set[tuple[str, str]] = set()
        self.events: list[InfractionEvent] = []
        self.stopped_at: set[str] = set()
        self._segments = [(i, p.segments) for i, p in enumerate(world.spec.map) if p.kind == "road_boundary"]
        self.offroad = False

    def _emit(self, kind: str, obj: str, tick: int, out: list) -> None:
        if (kind, obj) in self.fired:
            return
        self.fired.add((kind, obj))
        ev = InfractionEvent(kind, tick, obj)
        self.events.append(ev)
        out.append(ev)

    def update(self, tick: int, t: float, pose: Pose2, speed: float) -> list[InfractionEvent]:
        out: list[InfractionEvent] = []
        fp = self.footprint
        for agent, (x, y, h, _) in self.world.agent_states(t):
            if footprints_overlap(pose, fp, Pose2(x, y, h), agent.footprint):
                kind = "collision_static" if agent.kind == "static" else "collision_vehicle"
                self._emit(kind, agent.id, tick, out)
        ego = np.array([[pose.x, pose.y, pose.heading]])
        for e in self.world.spec.traffic_elements:
            if not e.affects_ego:
                continue
            line = np.asarray(e.stop_line, dtype=float).reshape(1, 2, 2)
            crossing = bool(poses_hit_segments(ego, fp, line)[0])
            if e.kind == "traffic_light":
                if crossing and e.state_at(t) == "red":
                    self._emit("red_light", e.id, tick, out)
            else:
                if speed < STOP_SPEED and _distance_to_segment(pose, line[0]) <= STOP_ZONE + 0.5 * fp.length:
                    self.stopped_at.add(e.id)
                if crossing and speed > STOP_SPEED and e.id not in self.stopped_at:
                    self._emit("stop_sign", e.id, tick, out)
        self.offroad = False
        for i, segs in self._segments:
            if poses_hit_segments(ego, fp, segs)[0]:
                self.offroad = True
                self._emit("offroad", f"boundary_{i}", tick, out)
        return out


def _distance_to_segment(pose: Pose2, seg: np.ndarray) -> float:
    a, b = seg[0], seg[1]
    p = np.array([pose.x, pose.y])
    ab = b - a
    u = float(np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0))
    return float(np.linalg.norm(p - (a + u * ab)))


def detect_infractions(tick: int, t: float, pose: Pose2, speed: float, detector: InfractionDetector) -> list[InfractionEvent]:
    """Functional form of :meth:`InfractionDetector.update`."""
    return detector.update(tick, t, pose, speed)


# --------------------------------------------------------------------------- open loop


def open_loop_metrics(
    model,
    frames: Sequence,
    horizons: Sequence[float] = (1.0, 2.0, 3.0),
    dt_wp: float = 0.5,
    ego_fp: Footprint = DEFAULT_FOOTPRINT,
) -> dict:
    """L2 (m) and collision rate (%) at each horizon for a batch of demo frames.

    ``model`` is anything with ``predict(snapshots) -> (n, T, 2)`` or a plain
    callable with that signature. Each frame needs ``.snapshot`` and ``.gt``.
    """
    predict = model.predict if hasattr(model, "predict") else model
    snaps = [f.snapshot for f in frames]
    gts = np.stack([np.asarray(f.gt, dtype=float) for f in frames])
    preds = np.asarray(predict(snaps), dtype=float)
    T = gts.shape[1]
    err = np.linalg.norm(preds - gts, axis=-1)  # (n, T)
    out = {"l2": {}, "collision": {}}
    for k in horizons:
        idx = min(T, max(1, int(round(k / dt_wp))))
        hits = []
        for p, s in zip(preds, snaps):
            if not s.agents:
                hits.append(False)
                continue
            fut = np.stack([a.future for a in s.agents])
            hits.append(bool(agents_conflict_mask(p[None], ego_fp, fut, [a.footprint for a in s.agents], horizon=idx)[0]))
        out["l2"][f"{k:g}s"] = float(err[:, idx - 1].mean())
        out["collision"][f"{k:g}s"] = 100.0 * float(np.mean(hits))
    return out
