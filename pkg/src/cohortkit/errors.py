"""Exception taxonomy shared by every subsystem."""


class CohortkitError(Exception):
    """Base class for all library errors."""


class DimensionError(CohortkitError):
    """Tensor shapes do not line up for the requested operation."""


class ParameterError(CohortkitError):
    """A scalar argument is outside its valid range."""


class DegenerateInputError(CohortkitError):
    """Input is valid in shape but degenerate in value (e.g. zero vector)."""


class ContractError(CohortkitError):
    """An operation was called in a way that violates its contract."""


class ConfigError(CohortkitError):
    """A configuration object is internally inconsistent."""


class SchemaError(CohortkitError):
    """A data record does not match its declared schema."""


class InputError(CohortkitError):
    """A data value is malformed (non-finite, empty where forbidden, ...)."""


class TokenizationError(CohortkitError):
    """A token id fell outside the vocabulary."""


class CalibrationError(CohortkitError):
    """Threshold calibration is impossible on the given split."""


class CheckpointError(CohortkitError):
    """A checkpoint file is corrupt or has the wrong format version."""


class TrainingDiverged(CohortkitError):
    """Training hit a non-finite loss; carries the step and batch for diagnosis."""

    def __init__(self, message: str, step: int | None = None, batch=None):
        super().__init__(message)
        self.step = step
        self.batch = batch
