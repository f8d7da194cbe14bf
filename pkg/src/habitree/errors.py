"""Exception types shared across the package.

The CLI maps these onto exit codes: schema problems exit 2, solver
non-convergence exits 3, and model-condition violations (bad markets,
infeasible habit problems, failed equilibrium-existence conditions) exit 4.
"""


class HabitreeError(Exception):
    """Base class for all package errors."""


class SchemaError(HabitreeError):
    """Malformed or inconsistent JSON input; carries the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class MarketError(HabitreeError):
    """Market rejected: no one-signed aggregate state price density, or
    inconsistent prices/partitions."""


class InfeasibleProblemError(HabitreeError):
    """No consumption plan with strictly positive habit surplus exists."""


class ConvergenceError(HabitreeError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(message)


class ConditionError(HabitreeError):
    """A model existence/validity condition fails (e.g. equilibrium
    conditions on the endowment, or bound-recursion hypotheses)."""
