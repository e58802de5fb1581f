"""Exception types shared across the package."""


class DeepSenseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DeepSenseError, ValueError):
    """Inputs have inconsistent or unsupported dimensions."""


class SingularMatrixError(DeepSenseError):
    """A symmetric factorization failed; carries the failing pivot (1-based)."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class FormatError(DeepSenseError):
    """A serialized file is malformed; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ShapeError(DeepSenseError, ValueError):
    """Stored or supplied parameter shapes do not match the network spec."""


class UnsupportedScenarioError(DeepSenseError, ValueError):
    """The requested operation is undefined for this scenario kind."""


class GenerationError(DeepSenseError):
    """Signal generation failed (e.g. non-PSD signal covariance)."""


class DivergedTrainingError(DeepSenseError, RuntimeError):
    """Training produced a non-finite loss."""


class StateError(DeepSenseError, RuntimeError):
    """An object was used before the required fitting/training step."""


class ConfigError(DeepSenseError, ValueError):
    """An experiment config file is invalid."""
