"""Exception types raised across the package."""


class HybridError(RuntimeError):
    """Base class for failures while integrating or linearizing a hybrid system."""


class TangentialCrossing(HybridError):
    """The flow meets a guard with (near) zero normal rate; saltation is undefined."""


class MultipleSimultaneousCrossings(HybridError):
    pass


class SecondEventInStep(HybridError):
    """A second guard fired before the end of a step that already had an event."""


class EventInsideStep(HybridError):
    pass


class GuardToleranceError(HybridError):
    """Event location could not drive the guard below tolerance."""


class StepError(HybridError):
    """Wraps a failure inside ``simulate`` with the index of the offending step."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"step {index}: {cause}")
        self.index = index
        self.cause = cause


class ParameterError(ValueError):
    pass


class EstimationError(RuntimeError):
    pass


class NonPositiveQww(EstimationError):
    pass


class SingularValueHessian(EstimationError):
    pass


class RolloutDiverged(EstimationError):
    pass


class NoEventFound(EstimationError):
    pass


class SingularInnovationCovariance(EstimationError):
    pass
