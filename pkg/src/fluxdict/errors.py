"""Exception types shared across the toolkit."""


class FluxDictError(Exception):
    """Base class for toolkit errors."""


class ValidationError(FluxDictError, ValueError):
    """Input violates a documented precondition or invariant."""


class StorageError(FluxDictError, OSError):
    """A file could not be read or written, or is not in the expected format."""


class BackendError(FluxDictError):
    """The explanation backend failed or returned an unusable reply."""


class TrainingDiverged(FluxDictError):
    """Training produced a non-finite loss.

    ``snapshot`` holds a small dict of diagnostics captured at the failing step.
    """

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot
