"""Exception and warning classes raised across the package."""


class LanePricingError(ValueError):
    """Base class for all errors raised by lanepricing."""


class NetworkValidationError(LanePricingError):
    """A network description violates a structural requirement.

    ``violations`` holds every problem found, not just the first.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations is not None else [self]


class CycleDetected(NetworkValidationError):
    pass


class UnreachableEdge(NetworkValidationError):
    pass


class MultipleOrigins(NetworkValidationError):
    pass


class NonIncreasingLatency(NetworkValidationError):
    pass


class NegativeFlow(LanePricingError):
    pass


class NoPath(LanePricingError):
    pass


class InvalidHorizon(LanePricingError):
    pass


class TimeVaryingEligibleVot(LanePricingError):
    pass


class InfeasibleFlow(LanePricingError):
    pass


class NotBracketed(LanePricingError):
    pass


class AssumptionViolated(LanePricingError):
    pass


class NoInteriorCrossing(LanePricingError):
    pass


class UnknownCase(LanePricingError):
    pass


class NotConvergedError(LanePricingError):
    """Raised only where an unconverged equilibrium cannot be used at all."""


class ConvergenceWarning(UserWarning):
    """The equilibrium solver stopped before reaching its gap tolerance."""


class AssumptionWarning(UserWarning):
    """A modelling assumption used by the closed-form theory does not hold."""
