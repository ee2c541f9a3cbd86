"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A parameter is outside its documented range."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent or incomplete."""


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given inputs (e.g. single-class AUROC)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the loss trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic or structurally invalid checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Checksum mismatch."""


class PgmParseError(ValueError):
    """Malformed PGM header or truncated payload."""
