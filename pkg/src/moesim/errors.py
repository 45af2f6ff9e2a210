"""Exception types, one per subsystem, so CLI diagnostics can name the failing module."""


class MoesimError(Exception):
    """Base error. ``module`` identifies the subsystem that rejected the input."""

    module = "moesim"


class TraceError(MoesimError):
    module = "trace"


class CostModelError(MoesimError):
    module = "cost_model"


class AssignmentError(MoesimError):
    module = "assignment"


class ConstraintViolation(AssignmentError):
    """Raised when an assignment fails the placement constraints.

    ``violations`` lists every failed constraint with the offending indices.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class PrefetchError(MoesimError):
    module = "prefetch"


class CacheError(MoesimError):
    module = "cache"


class SimulationError(MoesimError):
    module = "simulator"


class ReportError(MoesimError):
    module = "metrics_report"


class ConfigError(MoesimError):
    module = "cli"
