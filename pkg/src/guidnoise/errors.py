"""Exception types shared across the package."""


class GuidNoiseError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(GuidNoiseError, ValueError):
    pass


class ShapeError(GuidNoiseError, ValueError):
    pass


class InvalidSigmaError(GuidNoiseError, ValueError):
    pass


class NonFiniteLossError(GuidNoiseError, FloatingPointError):
    """Raised when a training loss becomes NaN or infinite.

    Carries the diagnostics needed to reproduce the failing step.
    """

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class DatasetError(GuidNoiseError):
    pass


class CheckpointError(GuidNoiseError):
    pass
