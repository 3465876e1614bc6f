"""Exception and warning types shared across the package."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class AssumptionViolation(RuntimeError):
    """A support/feasibility assumption of the constrained problem does not hold."""


class InfiniteDivergenceError(AssumptionViolation):
    """A divergence is infinite because one distribution leaves the other's support."""


class ZeroProbabilityError(AssumptionViolation):
    """A log-probability gradient was requested for an action the policy never takes."""


class EnumerationCapError(RuntimeError):
    """Exhaustive enumeration was refused because it would exceed the configured cap."""


class HighVarianceWarning(RuntimeWarning):
    """Importance weights are so extreme that the estimate is unreliable."""


class ConfigError(ContractError):
    """An experiment configuration is invalid; the message names the offending line."""
