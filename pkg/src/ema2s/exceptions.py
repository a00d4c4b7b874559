"""Exception hierarchy shared by every stage of the pipeline."""


class EMA2SError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EMA2SError, ValueError):
    """An array or argument violates a shape, range or emptiness contract."""


class DegenerateChannelError(InvalidInputError):
    """A channel has zero maximum magnitude and cannot be normalized."""


class ConfigurationError(EMA2SError):
    """A configuration is inconsistent (missing checkpoint, unknown variant, ...)."""


class DivergenceError(EMA2SError):
    """Training produced a non-finite loss.

    Attributes
    ----------
    checkpoint : object or None
        Diagnostic checkpoint captured right before the failing step.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StageError(EMA2SError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
