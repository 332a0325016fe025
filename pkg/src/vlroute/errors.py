"""Exception hierarchy shared by every subsystem."""


class VLRouteError(Exception):
    """Base class for all package errors."""


class DimensionError(VLRouteError, ValueError):
    """Operand shapes are incompatible."""


class RankError(DimensionError):
    """Operand has the wrong number of axes."""


class PreconditionError(VLRouteError, ValueError):
    """An operation was called outside its documented domain."""


class ConfigurationError(VLRouteError, ValueError):
    """A model, unit or experiment was configured inconsistently."""


class TaskError(VLRouteError, KeyError):
    """A task tag is not known to the model."""


class ScheduleError(VLRouteError, RuntimeError):
    """The optimizer was stepped outside its schedule."""


class CheckpointError(VLRouteError, ValueError):
    """A checkpoint archive is malformed or belongs to another architecture."""


class NonFiniteLossError(VLRouteError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class InvariantError(VLRouteError, AssertionError):
    """A checked invariant did not hold."""
