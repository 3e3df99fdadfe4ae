"""Exception types shared across the package."""


class FedNCMError(Exception):
    """Base class for all package errors."""


class ParameterError(FedNCMError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(FedNCMError, ValueError):
    """Array shapes do not compose."""


class StateError(FedNCMError, RuntimeError):
    """An operation cannot proceed from the current state."""


class LoadError(FedNCMError, ValueError):
    """A data or checkpoint file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(FedNCMError, ValueError):
    """An experiment config is invalid; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
