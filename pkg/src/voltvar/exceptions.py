"""Exception hierarchy shared by every module."""


class VoltVarError(Exception):
    """Base class for all package errors."""


class ValidationError(VoltVarError, ValueError):
    """Input values violate a documented precondition."""


class TopologyError(ValidationError):
    """Line list does not describe a tree rooted at the substation."""


class ParseError(ValidationError):
    """A file could not be parsed or has inconsistent dimensions."""


class ModelRejected(ValidationError):
    """Sensitivity matrix fails the positive-definiteness test."""


class KindError(ValidationError):
    """Operation requires a single-phase model but got a multiphase one (or vice versa)."""


class DegenerateParameterization(ValidationError):
    """Slope is infinite or zero where a finite positive one is required."""


class ConvergenceError(VoltVarError, RuntimeError):
    """Iterative method did not meet its tolerance within its budget."""


class InfeasibleError(VoltVarError):
    """The feasible set of the rule-design problem is empty.

    ``binding`` names the constraint rows responsible.
    """

    def __init__(self, message, binding=()):
        super().__init__(message)
        self.binding = list(binding)


class BoundaryAmbiguity(VoltVarError):
    """Region enumeration found no consistent assignment (numerical boundary case)."""
