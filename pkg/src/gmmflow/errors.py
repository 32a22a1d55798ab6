"""Exception hierarchy shared by the library and the command line."""


class GmmflowError(Exception):
    """Base class for all library errors."""


class ValidationError(GmmflowError, ValueError):
    """Input violates a documented precondition (CLI exit code 2)."""


class NotPsdError(ValidationError):
    """A matrix expected to be positive semidefinite is not."""


class NumericalError(GmmflowError, ArithmeticError):
    """A computation failed numerically (CLI exit code 3)."""


class IntegrationDiverged(NumericalError):
    """Particle state became non-finite during integration."""

    def __init__(self, step: int):
        super().__init__(f"integration diverged at step {step}")
        self.step = step


class InfeasibleError(GmmflowError):
    """An optimization problem has no feasible point (CLI exit code 4)."""


class HeavyTailWarning(UserWarning):
    """A Student-t marginal has nu <= 2, so its second moment is infinite."""
