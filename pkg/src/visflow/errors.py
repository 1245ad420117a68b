"""Exception hierarchy shared across the package."""


class VisflowError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VisflowError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(VisflowError):
    """A softmax row has no allowed entries."""

    def __init__(self, row: int):
        self.row = row
        super().__init__(f"softmax row {row} is fully masked")


class TapeError(VisflowError):
    """Gradient tape misuse (e.g. running backward twice)."""


class MissingGradientError(VisflowError):
    """A trace lacks attention gradients required by the computation."""


class ConfigError(VisflowError):
    """A configuration object violates its invariants."""


class LayoutError(VisflowError):
    """A token layout is malformed or does not match the sequence."""


class UnsupportedComboError(VisflowError):
    """A forward pass was requested with mutually exclusive features."""


class TrainingDivergedError(VisflowError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class ScheduleError(VisflowError):
    """A pruning schedule is malformed."""


class CheckpointError(VisflowError):
    """Base class for checkpoint file problems."""


class BadMagicError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointError):
    """The checkpoint format version is unsupported."""


class TruncatedPayloadError(CheckpointError):
    """The tensor payload is shorter than the manifest promises."""


class ManifestError(CheckpointError):
    """The tensor manifest is inconsistent with the model config."""
