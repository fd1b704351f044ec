"""Exception types shared across the package.

Validation failures subclass ValueError, I/O format failures subclass
OSError, so generic handlers still behave sensibly.
"""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NonScalarRootError(ValueError):
    """backward() was started from a tensor that is not a scalar."""


class MissingGradError(ValueError):
    """An optimizer step saw a parameter without a populated gradient."""


class SupportMismatchError(ValueError):
    """Two discrete distributions are defined over different supports."""


class AbsoluteContinuityViolationError(ValueError):
    """KL(p||q) requested where p puts mass on a point with q == 0."""


class GammaOutOfRangeError(ValueError):
    """Mixture weight gamma outside (0, 1]."""


class LambdaOutOfRangeError(ValueError):
    """Loss weight lambda outside [0, 1]."""


class EmptyBatchError(ValueError):
    """A loss was requested over an empty score batch."""


class EmptyNormalSetError(ValueError):
    """Training requested with no normal images."""


class DivergenceDetectedError(RuntimeError):
    """Training produced a non-finite loss; last good checkpoint retained."""

    def __init__(self, message, epoch=None, iteration=None):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration


class NonFiniteLossError(RuntimeError):
    """Latent search hit a non-finite loss value."""

    def __init__(self, message, trace_position=None, item_id=None):
        super().__init__(message)
        self.trace_position = trace_position
        self.item_id = item_id


class BadMagicError(OSError):
    """A binary file does not start with the expected magic number."""


class TruncatedFileError(OSError):
    """A binary file ended before (or after) its declared payload."""


class DimensionOverflowError(OSError):
    """Declared dimensions are implausibly large for this artifact."""


class MissingClassError(ValueError):
    """A dataset split requires a class that is absent from the data."""


class FractionOutOfRangeError(ValueError):
    """Contamination fraction outside [0, 0.5]."""


class PoolExhaustedError(ValueError):
    """Not enough reserved abnormal images to satisfy an injection."""


class SingleClassError(ValueError):
    """A metric needs both normal and abnormal items but got one class."""


class EmptyInputError(ValueError):
    """An aggregate was requested over an empty input collection."""


class EmptyMaskError(ValueError):
    """Localization scoring requires a non-empty ground-truth mask."""
