"""Kinematic bicycle plant and the PID trajectory tracker."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..exceptions import ValidationError
from ..geometry import Pose2, cumulative_arclength, point_along_polyline, project_onto_polyline
from ..scene import ControlCommand


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.8
    max_accel: float = 3.0
    max_brake: float = 6.0
    max_steer_angle: float = math.radians(35.0)
    drag: float = 0.003


DEFAULT_VEHICLE = VehicleParams()


@dataclass(frozen=True)
class EgoState:
    pose: Pose2
    speed: float = 0.0
    wheelbase: float = DEFAULT_VEHICLE.wheelbase

    def __post_init__(self):
        if self.speed < 0:
            raise ValidationError(f"speed must be non-negative, got {self.speed}")
        if self.wheelbase <= 0:
            raise ValidationError("wheelbase must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.pose.x, self.pose.y, self.pose.heading])


def bicycle_step(s: EgoState, c: ControlCommand, dt: float, vehicle: VehicleParams = DEFAULT_VEHICLE) -> EgoState:
    """Advance the kinematic bicycle by ``dt`` (explicit Euler on the current state)."""
    if not 0.0 < dt <= 0.1:
        raise ValidationError(f"dt must be in (0, 0.1], got {dt}")
    v = s.speed
    accel = vehicle.max_accel * c.throttle - vehicle.max_brake * c.brake - vehicle.drag * v * v
    delta = vehicle.max_steer_angle * c.steer
    h = s.pose.heading
    x = s.pose.x + v * math.cos(h) * dt
    y = s.pose.y + v * math.sin(h) * dt
    h = h + v / s.wheelbase * math.tan(delta) * dt
    return EgoState(Pose2(x, y, h), max(0.0, v + accel * dt), s.wheelbase)


def accel_to_command(accel: float, speed: float, steer: float, vehicle: VehicleParams = DEFAULT_VEHICLE) -> ControlCommand:
    """Map a desired acceleration to throttle or brake, compensating drag."""
    raw = accel + vehicle.drag * speed * speed
    if raw >= 0:
        return ControlCommand(steer, raw / vehicle.max_accel, 0.0)
    return ControlCommand(steer, 0.0, -raw / vehicle.max_brake)


@dataclass(frozen=True)
class PIDGains:
    lat_kp: float = 1.4
    lat_ki: float = 0.05
    lat_kd: float = 0.1
    lon_kp: float = 1.5
    lon_ki: float = 0.2
    lon_kd: float = 0.0
    lookahead_gain: float = 0.6
    lookahead_min: float = 2.0
    lookahead_max: float = 6.0
    integral_limit: float = 2.0


@dataclass
class PIDController:
    """Stateful lateral/longitudinal PID; one instance per episode."""

    gains: PIDGains = field(default_factory=PIDGains)
    vehicle: VehicleParams = DEFAULT_VEHICLE
    dt_wp: float = 0.5
    lat_integral: float = 0.0
    lon_integral: float = 0.0
    prev_lat_err: float | None = None
    prev_lon_err: float | None = None

    def reset(self) -> None:
        self.lat_integral = self.lon_integral = 0.0
        self.prev_lat_err = self.prev_lon_err = None

    def target_speed(self, plan: np.ndarray, start: np.ndarray, elapsed: float) -> float:
        """Mean plan speed over the one-second window starting ``elapsed`` after planning."""
        pts = np.vstack([start, plan])
        s = cumulative_arclength(pts)
        times = np.arange(len(pts)) * self.dt_wp
        s0 = np.interp(elapsed, times, s)
        s1 = np.interp(elapsed + 1.0, times, s)
        return float(s1 - s0)

    def control(
        self, state: EgoState, plan, dt: float = 0.05, start=None, elapsed: float = 0.0
    ) -> ControlCommand:
        """Track ``plan`` (``(T, 2)``, current ego frame).

        ``start`` is where the plan began (ego origin by default) and
        ``elapsed`` how long ago it was made; both only matter between replans.
        """
        g = self.gains
        plan = np.asarray(plan, dtype=float)
        start = np.zeros(2) if start is None else np.asarray(start, dtype=float)
        v = state.speed
        target_v = self.target_speed(plan, start, elapsed)

        path = np.vstack([start, plan])
        keep = np.concatenate([[True], np.linalg.norm(np.diff(path, axis=0), axis=1) > 1e-6])
        path = path[keep]
        if len(path) >= 2 and cumulative_arclength(path)[-1] > 0.1:
            lookahead = min(g.lookahead_max, max(g.lookahead_min, g.lookahead_gain * v))
            s_proj, _ = project_onto_polyline(path, np.zeros(2))
            target, _ = point_along_polyline(path, s_proj + lookahead)
            lat_err = math.atan2(target[1], target[0]) if np.linalg.norm(target) > 1e-6 else 0.0
        else:
            lat_err = 0.0
        self.lat_integral = float(np.clip(self.lat_integral + lat_err * dt, -g.integral_limit, g.integral_limit))
        lat_d = 0.0 if self.prev_lat_err is None else (lat_err - self.prev_lat_err) / dt
        self.prev_lat_err = lat_err
        steer = g.lat_kp * lat_err + g.lat_ki * self.lat_integral + g.lat_kd * lat_d

        lon_err = target_v - v
        self.lon_integral = float(np.clip(self.lon_integral + lon_err * dt, -g.integral_limit, g.integral_limit))
        lon_d = 0.0 if self.prev_lon_err is None else (lon_err - self.prev_lon_err) / dt
        self.prev_lon_err = lon_err
        accel = g.lon_kp * lon_err + g.lon_ki * self.lon_integral + g.lon_kd * lon_d
        if target_v < 0.05:
            # hold the car at standstill instead of creeping on the integrator
            self.lon_integral = min(self.lon_integral, 0.0)
            accel = min(accel, -1.0)
        return accel_to_command(accel, v, steer, self.vehicle)


def pid_control(
    s: EgoState,
    plan,
    gains: PIDGains | None = None,
    controller: PIDController | None = None,
    dt: float = 0.05,
    elapsed: float = 0.0,
    start=None,
) -> ControlCommand:
    """Functional entry point; pass a ``controller`` to keep integrator state across ticks."""
    if controller is None:
        controller = PIDController(gains or PIDGains())
    elif gains is not None:
        controller.gains = gains
    return controller.control(s, plan, dt=dt, start=start, elapsed=elapsed)


def with_speed(s: EgoState, speed: float) -> EgoState:
    return replace(s, speed=speed)
