"""Probabilistic planning over a trajectory vocabulary, with a bundled 2D driving simulator."""
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    EpisodeComplete,
    FormatError,
    HorizonMismatchError,
    InsufficientDemosError,
    NonFiniteError,
    ProbPlanError,
    ShapeError,
    SimulationDivergedError,
    ValidationError,
)
from .geometry import Footprint, Polyline, Pose2, conflict_with_agent, conflict_with_boundary, footprints_overlap, traj_distance
from .nn import ModelConfig, ParamStore, adam_step, grad_check
from .planner import (
    ActionDistribution,
    MeanTrajectoryRegressor,
    PlannerPolicy,
    ProbabilisticPlanner,
    TrainConfig,
    action_distribution,
    build_target_distribution,
    conflict_loss,
    conflict_mask,
    distribution_loss,
    score_actions,
    select_action_argmax,
    select_topk_with_rules,
    train_step,
)
from .scene import SceneSnapshot, embed_scene, load_bundled_scenario, load_scenario
from .vocabulary import (
    FourierActionEncoder,
    PlanningVocabulary,
    TrajectoryVocabulary,
    build_vocabulary,
    encode_action,
    load_vocabulary,
    nearest_vocab_action,
    save_vocabulary,
)

__version__ = "0.1.0"
