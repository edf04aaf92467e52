"""Exception hierarchy shared across the package."""


class ProbPlanError(Exception):
    """Base class for all errors raised by probplan."""


class ValidationError(ProbPlanError, ValueError):
    """Input violates a documented invariant."""


class HorizonMismatchError(ValidationError):
    """Two trajectories (or a file and a pipeline) disagree on the horizon T."""


class ShapeError(ValidationError):
    """Tensor shapes are incompatible for the requested operation."""


class FormatError(ProbPlanError):
    """A binary or JSON artifact is malformed.

    Attributes:
        offset: byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDemosError(ValidationError):
    """Fewer demonstrations than requested vocabulary entries."""


class DegenerateInputError(ValidationError):
    """Input has too few distinct elements to satisfy the request."""


class BandRangeError(ValidationError):
    """Frequency band index outside [0, L)."""


class ConfigError(ValidationError):
    """Configuration is inconsistent or references unknown names."""


class NonFiniteError(ProbPlanError, FloatingPointError):
    """A forward pass or loss produced NaN/Inf."""


class SimulationDivergedError(ProbPlanError):
    """Closed-loop state became non-finite."""

    def __init__(self, message, tick=None):
        super().__init__(message if tick is None else f"{message} (tick {tick})")
        self.tick = tick


class EpisodeComplete(ProbPlanError):
    """Raised by the expert when the route is exhausted."""
