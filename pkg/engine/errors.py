class SwitchingError(Exception):
    """Base class for every failure the engines report to callers."""

    exit_code = 1


class ConfigError(SwitchingError):
    exit_code = 2


class InvalidPolicyError(SwitchingError, ValueError):
    exit_code = 2


class IncompatibleHorizonError(SwitchingError, ValueError):
    """The requested interval length does not tile the policy horizon."""

    exit_code = 2


class CoverageDomainError(SwitchingError, ValueError):
    """A coverage vector left the unit simplex."""

    exit_code = 3


class NoSaddleError(SwitchingError):
    """The parameter point has no saddle steady state to trace a separatrix from."""

    exit_code = 3


class MarginalStabilityError(NoSaddleError):
    exit_code = 3


class UnsupportedDimensionError(SwitchingError):
    exit_code = 3


class IntegrationError(SwitchingError):
    """The ODE integrator gave up (step-size underflow or similar)."""

    exit_code = 4
