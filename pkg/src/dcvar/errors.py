"""Exception types shared across the package."""


class DcvarError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DcvarError, ValueError):
    pass


class NonSPD(DcvarError, ValueError):
    """A matrix required to be symmetric positive definite is not."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class NonFinite(DcvarError, FloatingPointError):
    """Model integration produced NaN/Inf or left the blow-up threshold."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateGramMatrix(DcvarError, ValueError):
    pass


class NonFiniteAtStart(DcvarError, ValueError):
    pass


class LineSearchFailure(DcvarError, RuntimeError):
    pass


class CycleDiverged(DcvarError, RuntimeError):
    def __init__(self, message, cycle=None):
        super().__init__(message)
        self.cycle = cycle


class ConfigError(DcvarError, ValueError):
    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line
