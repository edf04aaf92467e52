"""Demonstration datasets: expert collection and the JSONL file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import FormatError, HorizonMismatchError, ValidationError
from .scene import ControlCommand, ScenarioSpec, SceneSnapshot
from .sim.episode import ExpertDriver, Frame, simulate_episode
from .sim.world import Perturbation
from .vocabulary import atomic_write_bytes

DATASET_FORMAT = "probplan-demos"
DATASET_VERSION = 1
FRAME_RATE = 2.0
STEER_NOISE = 0.03


@dataclass
class DemoDataset:
    frames: list[Frame]
    horizon: int = 6
    dt_wp: float = 0.5
    frame_rate: float = FRAME_RATE
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for f in self.frames:
            if np.asarray(f.gt).shape != (self.horizon, 2):
                raise HorizonMismatchError(f"frame {f.snapshot.frame_id} has gt shape {np.shape(f.gt)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def snapshots(self) -> list[SceneSnapshot]:
        return [f.snapshot for f in self.frames]

    @property
    def trajectories(self) -> np.ndarray:
        if not self.frames:
            return np.zeros((0, self.horizon, 2))
        return np.stack([np.asarray(f.gt, dtype=float) for f in self.frames])

    def select(self, scenarios: Iterable[str] | None = None, seeds: Iterable[int] | None = None, variants=None) -> "DemoDataset":
        scenarios = None if scenarios is None else set(scenarios)
        seeds = None if seeds is None else set(seeds)
        variants = None if variants is None else set(variants)
        keep = [
            f
            for f in self.frames
            if (scenarios is None or f.meta.get("scenario") in scenarios)
            and (seeds is None or f.meta.get("seed") in seeds)
            and (variants is None or f.meta.get("variant") in variants)
        ]
        return DemoDataset(keep, self.horizon, self.dt_wp, self.frame_rate, 0, dict(self.meta))

    def to_bytes(self) -> bytes:
        header = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "horizon": self.horizon,
            "dt_wp": self.dt_wp,
            "frame_rate": self.frame_rate,
            "n_frames": len(self.frames),
            "dropped": self.dropped,
            "meta": self.meta,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for f in self.frames:
            rec = {
                "snapshot": f.snapshot.to_dict(),
                "gt": np.asarray(f.gt, dtype=float).tolist(),
                "control": f.control.as_list(),
                "t": f.t,
                "tick": f.tick,
                "meta": f.meta,
            }
            lines.append(json.dumps(rec, sort_keys=True))
        return ("\n".join(lines) + "\n").encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DemoDataset":
        lines = data.decode().splitlines()
        if not lines:
            raise FormatError("empty dataset file", offset=0)
        offset = 0
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as err:
            raise FormatError(f"dataset header is not JSON: {err.msg}", offset=err.pos) from None
        if header.get("format") != DATASET_FORMAT:
            raise FormatError("not a demonstration dataset", offset=0)
        if header.get("version") != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {header.get('version')}", offset=0)
        frames = []
        offset = len(lines[0]) + 1
        for line in lines[1:]:
            try:
                rec = json.loads(line)
                frames.append(
                    Frame(
                        SceneSnapshot.from_dict(rec["snapshot"]),
                        np.array(rec["gt"], dtype=float),
                        ControlCommand(*rec["control"]),
                        float(rec["t"]),
                        int(rec["tick"]),
                        dict(rec.get("meta", {})),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise FormatError(f"malformed dataset record: {err}", offset=offset) from None
            offset += len(line) + 1
        return cls(
            frames,
            int(header["horizon"]),
            float(header["dt_wp"]),
            float(header["frame_rate"]),
            int(header.get("dropped", 0)),
            dict(header.get("meta", {})),
        )


def save_dataset(ds: DemoDataset, path) -> None:
    atomic_write_bytes(path, ds.to_bytes())


def load_dataset(path, expected_T: int | None = None) -> DemoDataset:
    with open(path, "rb") as fh:
        ds = DemoDataset.from_bytes(fh.read())
    if expected_T is not None and ds.horizon != expected_T:
        raise HorizonMismatchError(f"dataset has T={ds.horizon}, pipeline expects T={expected_T}")
    return ds


def collect_demonstrations(
    scenarios: Sequence[ScenarioSpec],
    seeds: Sequence[int],
    horizon: int = 6,
    dt_wp: float = 0.5,
    perturbation: Perturbation = Perturbation(),
    dt: float = 0.05,
    steer_noise: float = STEER_NOISE,
) -> DemoDataset:
    """Run the expert over every scenario, variant and seed and keep its 2 Hz frames.

    Frames whose replan interval contains an expert infraction are dropped
    and counted in ``dropped``. ``steer_noise`` perturbs the executed
    steering (see :class:`ExpertDriver`); the recorded plans stay clean.
    """
    if not scenarios:
        raise ValidationError("no scenarios to collect from")
    replan = 1.0 / FRAME_RATE
    every = int(round(replan / dt))
    frames, dropped = [], 0
    for spec in sorted(scenarios, key=lambda s: s.name):
        for variant in spec.expert_variants:
            for seed in seeds:
                res = simulate_episode(
                    spec,
                    ExpertDriver(variant, steer_noise=steer_noise, noise_seed=seed),
                    seed=seed,
                    dt=dt,
                    replan=replan,
                    perturbation=perturbation,
                    horizon=horizon,
                    dt_wp=dt_wp,
                    record_frames=True,
                )
                bad_ticks = [e.tick for e in res.events]
                for f in res.frames:
                    if any(f.tick < bt <= f.tick + every for bt in bad_ticks):
                        dropped += 1
                        continue
                    f.meta = {"scenario": spec.name, "seed": int(seed), "variant": variant, "t": round(f.t, 6)}
                    frames.append(f)
    return DemoDataset(frames, horizon, dt_wp, FRAME_RATE, dropped, {"seeds": [int(s) for s in seeds], "steer_noise": steer_noise})
