"""Exception types shared across the package."""


class RegalError(Exception):
    """Base class for all package errors."""


class ConfigError(RegalError, ValueError):
    """A configuration value is invalid; ``field`` names the offender."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InvalidInputError(RegalError, ValueError):
    """An operation received an argument outside its domain."""


class InvalidQueryError(RegalError, ValueError):
    """A label query referenced a region that does not belong to the scene."""


class TrainingDivergedError(RegalError, RuntimeError):
    """Training produced a non-finite loss; ``step`` is the offending update."""

    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"step {step}: {message}")
        self.step = step
