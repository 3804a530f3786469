from __future__ import annotations


class RSLabError(Exception):
    pass


class ConfigError(RSLabError, ValueError):
    """Invalid configuration; ``field`` names the offending entry when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        self.detail = message
        super().__init__(f"{field}: {message}" if field else message)


class StepSizeError(RSLabError, ValueError):
    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(message)


class SkeletonError(RSLabError, ValueError):
    def __init__(self, message: str, partial_sum: float):
        self.partial_sum = partial_sum
        super().__init__(message)


class InvariantError(RSLabError, RuntimeError):
    pass


class StructureError(RSLabError, ValueError):
    """Markov chain failed a structural check (irreducible / aperiodic)."""

    def __init__(self, message: str, check: str):
        self.check = check
        super().__init__(message)


class InsufficientDataError(RSLabError, ValueError):
    pass


class CalibrationError(RSLabError, RuntimeError):
    pass


class CapabilityError(RSLabError, RuntimeError):
    pass
