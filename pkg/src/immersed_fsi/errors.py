"""Exception types shared across the package."""


class FsiError(Exception):
    """Base class for all errors raised by immersed_fsi."""


class InvalidArgumentError(FsiError, ValueError):
    pass


class OutOfDomainError(FsiError):
    """A point or the structure left the unit square."""


class GeometryError(FsiError):
    """The requested curve touches the domain boundary or is degenerate."""


class SingularSystemError(FsiError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ConvergenceError(FsiError):
    pass


class InstabilityError(FsiError):
    """Energy grew beyond the blow-up threshold."""


class ConfigError(FsiError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
