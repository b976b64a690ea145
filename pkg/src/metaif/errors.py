"""Exception hierarchy shared by every module."""


class MetaIFError(Exception):
    """Base class for all errors raised by metaif."""


class DimensionError(MetaIFError, ValueError):
    pass


class NotSymmetricError(MetaIFError, ValueError):
    pass


class FactorizationError(MetaIFError, ArithmeticError):
    """Raised when a matrix that must be positive definite is not."""


class GuardError(MetaIFError, ValueError):
    """A size guard (e.g. dense Hessian parameter limit) was exceeded."""


class PrecheckError(MetaIFError, ArithmeticError):
    """Neumann spectral precheck failed: the iteration would not contract."""


class NumericalError(MetaIFError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class ConfigError(MetaIFError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConvergenceError(MetaIFError, RuntimeError):
    """A solver stopped before reaching its tolerance.

    ``achieved`` is the final gradient norm; ``state`` optionally carries the
    partially trained object so callers can still inspect it.
    """

    def __init__(self, message: str, achieved: float, state=None):
        self.achieved = achieved
        self.state = state
        super().__init__(f"{message} (achieved gradient norm {achieved:.3e})")
