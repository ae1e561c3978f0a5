"""Exception types shared across modules."""


class GoalIgaError(Exception):
    """Base class for library errors."""


class GeometryError(GoalIgaError):
    """Degenerate surface metric or Jacobian."""


class SolverError(GoalIgaError):
    """Linear or eigen solve failed; carries diagnostics."""

    def __init__(self, msg: str, **info):
        super().__init__(msg)
        self.info = info


class NonConvergenceError(GoalIgaError):
    """Iterative nonlinear solve failed; ``state`` holds the last iterate."""

    def __init__(self, msg: str, state=None, **info):
        super().__init__(msg)
        self.state = state
        self.info = info


class ContinuationError(NonConvergenceError):
    """Arc-length stepping could not proceed after step-size cuts."""


class ContractError(GoalIgaError):
    """A documented precondition of an operation was violated."""


class EstimatorError(SolverError):
    """The error estimate cannot be formed (for instance a singular dual tangent)."""


class ResourceLimitError(GoalIgaError):
    """An adaptive run stopped at a wall-clock or dof limit set by the caller."""
