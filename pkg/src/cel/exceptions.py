"""Exception hierarchy shared by the package and mapped to CLI exit codes."""


class CELError(Exception):
    """Base class for all package errors."""


class DatasetFormatError(CELError, ValueError):
    """A dataset or checkpoint directory is not in the expected format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(CELError, ValueError):
    """Payload does not agree with its declared metadata or content hash."""


class InsufficientSamplesError(CELError, ValueError):
    pass


class NonFiniteLossError(CELError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, last_checkpoint=None):
        self.epoch = epoch
        self.batch = batch
        self.last_checkpoint = last_checkpoint
        ref = last_checkpoint if last_checkpoint is not None else "none"
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"last good checkpoint: {ref}"
        )


class InvariantViolation(CELError, AssertionError):
    """A runtime invariant on confidences or prototypes failed."""
