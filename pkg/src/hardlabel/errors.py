"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its allowed range or has the wrong shape."""


class DomainError(ValueError):
    """A density or map was evaluated outside its domain."""


class DegenerateMarginalError(ArithmeticError):
    """A gradient marginal vanished while its joint density did not."""


class TrainingDivergedError(ArithmeticError):
    """A training loss became NaN or infinite."""


class UnsupportedVictimError(TypeError):
    """The requested operation is not defined for this victim kind."""


class PreconditionError(ValueError):
    """The attack was started from a state that violates its contract."""


class DegenerateDirectionError(ArithmeticError):
    """A decoded search direction has zero norm."""


class EstimationFailedError(RuntimeError):
    """Every finite-difference leg of a gradient estimate was dropped."""


class InitializationFailedError(RuntimeError):
    """No adversarial starting direction was found within the retry cap."""


class InvalidStatsError(ValueError):
    """Gaussian statistics are not a valid (PSD) mean/covariance pair."""


class BudgetExhausted(Exception):
    """Raised by a budgeted oracle when the next query would exceed the budget."""
