import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from probplan.exceptions import ValidationError
from probplan.geometry import Pose2
from probplan.scene import ControlCommand
from probplan.sim.control import (
    EgoState,
    PIDController,
    VehicleParams,
    accel_to_command,
    bicycle_step,
    pid_control,
)

from helpers import fit_circle, straight, track_line

NO_DRAG = VehicleParams(drag=0.0)


def test_straight_motion():
    s = bicycle_step(EgoState(Pose2(0, 0, 0), 10.0), ControlCommand(), 0.1, NO_DRAG)
    assert s.pose.x == pytest.approx(1.0) and s.pose.y == 0.0 and s.pose.heading == 0.0
    assert s.speed == 10.0


def test_rest_is_a_fixed_point():
    start = EgoState(Pose2(3, -2, 0.7), 0.0)
    s = bicycle_step(start, ControlCommand(steer=0.8), 0.05)
    assert s == start


def test_acceleration_and_braking():
    s = bicycle_step(EgoState(Pose2(0, 0, 0), 5.0), ControlCommand(throttle=1.0), 0.1, NO_DRAG)
    assert s.speed == pytest.approx(5.3)
    s = bicycle_step(EgoState(Pose2(0, 0, 0), 0.3), ControlCommand(brake=1.0), 0.1, NO_DRAG)
    assert s.speed == 0.0


def test_dt_range_enforced():
    with pytest.raises(ValidationError):
        bicycle_step(EgoState(Pose2(0, 0, 0)), ControlCommand(), 0.2)
    with pytest.raises(ValidationError):
        bicycle_step(EgoState(Pose2(0, 0, 0)), ControlCommand(), 0.0)
    with pytest.raises(ValidationError):
        EgoState(Pose2(0, 0, 0), -1.0)


@pytest.mark.parametrize("steer", [0.1, 0.3, -0.6])
def test_constant_steer_traces_circle(steer):
    state = EgoState(Pose2(0, 0, 0), 5.0)
    pts = []
    for _ in range(100):
        state = bicycle_step(state, ControlCommand(steer=steer), 0.05, NO_DRAG)
        pts.append(state.pose.position)
    _, radius = fit_circle(np.array(pts))
    expect = NO_DRAG.wheelbase / math.tan(abs(steer) * NO_DRAG.max_steer_angle)
    assert abs(radius - expect) / expect < 0.01


@given(st.floats(0, 40), st.floats(-1, 1), st.floats(0.001, 0.1), st.floats(0, 0.01))
def test_coasting_never_speeds_up(v, steer, dt, drag):
    s = bicycle_step(EgoState(Pose2(0, 0, 0), v), ControlCommand(steer=steer), dt, VehicleParams(drag=drag))
    assert s.speed <= v


def test_control_command_clamps():
    c = ControlCommand(2.0, 1.5, -0.5)
    assert (c.steer, c.throttle, c.brake) == (1.0, 1.0, 0.0)
    c = ControlCommand(-3.0, 0.7, 0.2)
    assert (c.steer, c.throttle, c.brake) == (-1.0, 0.0, 0.2)


@given(st.floats(-10, 10), st.floats(0, 30))
def test_accel_to_command_is_exclusive(accel, speed):
    c = accel_to_command(accel, speed, 0.0)
    assert c.throttle * c.brake == 0.0


def test_pid_equilibrium():
    c = PIDController(vehicle=NO_DRAG).control(EgoState(Pose2(0, 0, 0), 8.0), straight(8.0))
    assert abs(c.steer) < 1e-9
    assert c.throttle < 0.05 and c.brake == 0.0
    # with drag the only throttle is the feedforward that holds the speed
    c = PIDController().control(EgoState(Pose2(0, 0, 0), 8.0), straight(8.0))
    assert c.throttle == pytest.approx(0.003 * 64 / 3.0)


def test_pid_stop_demand():
    c = pid_control(EgoState(Pose2(0, 0, 0), 5.0), np.zeros((6, 2)))
    assert c.brake > 0 and c.throttle == 0


def test_pid_turns_toward_the_plan():
    plan = np.stack([np.linspace(2, 12, 6), np.linspace(0.5, 3, 6)], axis=-1)
    assert pid_control(EgoState(Pose2(0, 0, 0), 5.0), plan).steer > 0
    assert pid_control(EgoState(Pose2(0, 0, 0), 5.0), plan * [1, -1]).steer < 0


def test_lateral_step_converges():
    t, lat, _ = track_line(offset=1.0, speed=10.0, v0=10.0, seconds=6.0)
    assert lat[t <= 3.0][-1] < 0.2
    assert lat[t > 3.0].max() < 0.2


def test_tracks_straight_plan_from_rest():
    t, lat, v = track_line(offset=0.5, speed=10.0, v0=0.0, seconds=20.0)
    steady = t > 10.0
    assert lat[steady].max() < 0.2
    assert np.abs(v[steady] - 10.0).max() < 0.5
