"""Bundled closed-loop simulator: plant, controller, world, expert and metrics."""
from .control import DEFAULT_VEHICLE, EgoState, PIDController, PIDGains, VehicleParams, bicycle_step, pid_control
from .episode import ConstantPolicy, EpisodeResult, ExpertDriver, Frame, PlanDecision, TrackingPolicy, simulate_episode
from .expert import ExpertConfig, ExpertPolicy, expert_policy
from .metrics import DEFAULT_PENALTIES, InfractionDetector, InfractionEvent, detect_infractions, open_loop_metrics, score_episode
from .world import NO_PERTURBATION, Perturbation, World
