"""Closed-loop episodes: replan at 2 Hz, control at 20 Hz, score at the end."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from ..exceptions import ConfigError, EpisodeComplete, SimulationDivergedError, ValidationError
from ..geometry import DEFAULT_FOOTPRINT, Footprint, Pose2, normalize_angle, project_onto_polyline, to_local
from ..scene import ControlCommand, ScenarioSpec, SceneSnapshot
from ..vocabulary import atomic_write_bytes
from .control import DEFAULT_VEHICLE, EgoState, PIDController, PIDGains, VehicleParams, bicycle_step
from .expert import ExpertPlan, ExpertPolicy
from .metrics import InfractionDetector, InfractionEvent, score_episode
from .world import GOAL_TOLERANCE, NO_PERTURBATION, Perturbation, World


@dataclass
class PlanDecision:
    trajectory: np.ndarray
    argmax_index: int | None = None
    topk_indices: tuple = ()
    expert_plan: ExpertPlan | None = None


class TrackingPolicy:
    """Base for policies whose plans are followed by the PID tracker."""

    needs_route = False

    def __init__(self, gains: PIDGains | None = None, vehicle: VehicleParams = DEFAULT_VEHICLE, dt_wp: float = 0.5):
        self.controller = PIDController(gains or PIDGains(), vehicle, dt_wp)

    def reset(self) -> None:
        self.controller.reset()

    def replan(self, snap: SceneSnapshot, route_ego: np.ndarray) -> PlanDecision:
        raise NotImplementedError

    def act(self, decision: PlanDecision, local: tuple, speed: float, dt: float, elapsed: float) -> ControlCommand:
        x, y, h = local
        # re-express the plan in the current ego frame
        plan = to_local(decision.trajectory, (x, y, h))
        start = to_local(np.zeros(2), (x, y, h))
        state = EgoState(Pose2(0.0, 0.0, 0.0), speed)
        return self.controller.control(state, plan, dt=dt, start=start, elapsed=elapsed)


class ConstantPolicy(TrackingPolicy):
    """Always proposes the same ego-frame trajectory."""

    def __init__(self, trajectory, **kwargs):
        super().__init__(**kwargs)
        self.trajectory = np.asarray(trajectory, dtype=float)

    def replan(self, snap, route_ego) -> PlanDecision:
        return PlanDecision(self.trajectory.copy())


class ExpertDriver:
    """Runs :class:`ExpertPolicy` closed loop with its own control law between replans.

    ``steer_noise`` adds a Gaussian steering offset, redrawn at every replan,
    to the executed command only. The recorded plans stay clean, so collected
    frames show the expert recovering from states it would not reach alone.
    """

    needs_route = True

    def __init__(
        self,
        variant: str = "default",
        desired_speed: float | None = None,
        steer_noise: float = 0.0,
        noise_seed: int = 0,
        **kwargs,
    ):
        if steer_noise < 0:
            raise ConfigError(f"steer_noise must be non-negative, got {steer_noise}")
        self.variant = variant
        self._desired = desired_speed
        self._kwargs = kwargs
        self.steer_noise = float(steer_noise)
        self.noise_seed = int(noise_seed)
        self.expert = ExpertPolicy(variant, desired_speed=desired_speed, **kwargs)
        self._rng = np.random.default_rng([self.noise_seed, 1])
        self._offset = 0.0

    def configure(self, world: World) -> None:
        if self._desired is None:
            self.expert.desired_speed = world.desired_speed
        if "decision_distance" in world.spec.expert:
            self.expert.config = replace(self.expert.config, decision_distance=float(world.spec.expert["decision_distance"]))

    def reset(self) -> None:
        self.expert.reset()
        self._rng = np.random.default_rng([self.noise_seed, 1])
        self._offset = 0.0

    def replan(self, snap: SceneSnapshot, route_ego: np.ndarray) -> PlanDecision:
        plan = self.expert.plan(snap, route_ego)
        if self.steer_noise > 0:
            self._offset = float(self._rng.normal(0.0, self.steer_noise))
        return PlanDecision(plan.trajectory, expert_plan=plan)

    def act(self, decision: PlanDecision, local: tuple, speed: float, dt: float, elapsed: float) -> ControlCommand:
        x, y, h = local
        c = decision.expert_plan.control(x, y, h, speed, elapsed, self.expert.cleared, commit=True)
        if self._offset:
            c = ControlCommand(c.steer + self._offset, c.throttle, c.brake)
        return c


@dataclass
class Frame:
    """One 2 Hz sample: what the policy saw and what the expert did."""

    snapshot: SceneSnapshot
    gt: np.ndarray
    control: ControlCommand
    t: float
    tick: int
    meta: dict = field(default_factory=dict)


@dataclass
class EpisodeResult:
    scenario: str
    seed: int
    ticks: list
    events: list
    route_fraction: float
    offroad_fraction: float
    route_completion: float
    infraction_score: float
    driving_score: float
    frames: list = field(default_factory=list)
    executed_plans: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "route_completion": self.route_completion,
            "infraction_score": self.infraction_score,
            "driving_score": self.driving_score,
            "events": [e.to_dict() for e in self.events],
        }


def _yaw_rate(c: ControlCommand, speed: float, vehicle: VehicleParams) -> float:
    return speed / vehicle.wheelbase * math.tan(vehicle.max_steer_angle * c.steer)


def simulate_episode(
    scenario: ScenarioSpec,
    policy,
    seed: int = 0,
    dt: float = 0.05,
    replan: float = 0.5,
    perturbation: Perturbation = NO_PERTURBATION,
    penalties: Mapping[str, float] | None = None,
    horizon: int = 6,
    dt_wp: float = 0.5,
    ego_fp: Footprint = DEFAULT_FOOTPRINT,
    vehicle: VehicleParams = DEFAULT_VEHICLE,
    record_frames: bool = False,
    max_seconds: float | None = None,
) -> EpisodeResult:
    """Run one scenario closed loop. Deterministic given ``seed``."""
    world = World(scenario, seed=seed, horizon=horizon, dt_wp=dt_wp, perturbation=perturbation)
    if hasattr(policy, "configure"):
        policy.configure(world)
    policy.reset()
    detector = InfractionDetector(world, ego_fp)
    state = world.ego_start
    last_control = ControlCommand()
    replan_every = max(1, int(round(replan / dt)))
    seconds = scenario.episode_seconds if max_seconds is None else min(max_seconds, scenario.episode_seconds)
    n_ticks = int(round(seconds / dt))
    s_max, _ = project_onto_polyline(world.route, state.pose.position)
    s_start = s_max
    offroad_progress = 0.0
    fraction = 0.0
    ticks, frames, plans = [], [], []
    decision = None
    plan_origin = None
    for tick in range(n_ticks):
        t = tick * dt
        if tick % replan_every == 0:
            snap = world.snapshot(
                t, state, last_control, _yaw_rate(last_control, state.speed, vehicle), frame_id=f"{scenario.name}/{seed}/{tick}"
            )
            route_ego = world.route_in_ego(state) if getattr(policy, "needs_route", False) else None
            try:
                decision = policy.replan(snap, route_ego)
            except EpisodeComplete:
                fraction = 1.0
                break
            plan_origin = state.as_array()
            plans.append((tick, snap, np.asarray(decision.trajectory, dtype=float)))
        elapsed = (tick % replan_every) * dt
        local = to_local(state.as_array()[None, :2], plan_origin)[0]
        h_local = normalize_angle(state.pose.heading - plan_origin[2])
        control = policy.act(decision, (local[0], local[1], h_local), state.speed, dt, elapsed)
        if record_frames and tick % replan_every == 0:
            frames.append(Frame(snap, np.asarray(decision.trajectory, dtype=float), control, t, tick))
        try:
            state = bicycle_step(state, control, dt, vehicle)
        except ValidationError:
            # Pose2 refuses non-finite coordinates
            raise SimulationDivergedError(f"non-finite ego state in {scenario.name}", tick=tick) from None
        if not math.isfinite(state.speed):
            raise SimulationDivergedError(f"non-finite ego speed in {scenario.name}", tick=tick)
        last_control = control
        events = detector.update(tick + 1, t + dt, state.pose, state.speed)
        s, _ = project_onto_polyline(world.route, state.pose.position)
        if s > s_max:
            if detector.offroad:
                offroad_progress += s - s_max
            s_max = s
        ticks.append(
            {
                "t": round(t + dt, 10),
                "ego_pose": [state.pose.x, state.pose.y, state.pose.heading],
                "speed": state.speed,
                "control": control.as_list(),
                "argmax_index": decision.argmax_index,
                "topk_indices": list(decision.topk_indices),
                "agents": [[a.id, *st[:3]] for a, st in world.agent_states(t + dt)],
                "events": [e.kind for e in events],
            }
        )
        end = world.route[-1]
        if math.hypot(state.pose.x - end[0], state.pose.y - end[1]) < GOAL_TOLERANCE:
            fraction = 1.0
            break
    route_len = max(world.route_length - s_start, 1e-9)
    if fraction < 1.0:
        fraction = float(np.clip((s_max - s_start) / route_len, 0.0, 1.0))
    offroad_fraction = float(np.clip(offroad_progress / route_len, 0.0, 1.0))
    score = score_episode(detector.events, fraction, penalties, offroad_fraction)
    return EpisodeResult(
        scenario=scenario.name,
        seed=seed,
        ticks=ticks,
        events=list(detector.events),
        route_fraction=fraction,
        offroad_fraction=offroad_fraction,
        route_completion=score.route_completion,
        infraction_score=score.infraction_score,
        driving_score=score.driving_score,
        frames=frames,
        executed_plans=plans,
    )


def replay_bytes(result: EpisodeResult) -> bytes:
    lines = [json.dumps(rec, sort_keys=True) for rec in result.ticks]
    return ("\n".join(lines) + "\n").encode()


def write_replay(result: EpisodeResult, path) -> None:
    atomic_write_bytes(path, replay_bytes(result))


def read_replay(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def events_by_tick(events: list[InfractionEvent]) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for e in events:
        out.setdefault(e.tick, []).append(e.kind)
    return out


__all__ = [
    "ConstantPolicy",
    "EpisodeResult",
    "ExpertDriver",
    "Frame",
    "PlanDecision",
    "TrackingPolicy",
    "read_replay",
    "replay_bytes",
    "simulate_episode",
    "write_replay",
]
