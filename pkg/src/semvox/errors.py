"""Exception hierarchy shared across the package.

Everything derives from :class:`SemvoxError` so callers (notably the CLI)
can treat any package-raised error as a bad-input condition.
"""


class SemvoxError(Exception):
    """Base class for all errors raised by this package."""


# geometry

class DisparityTooSmall(SemvoxError):
    """Disparity at or below the configured epsilon; point would sit at infinity."""


class NonPositiveDepth(SemvoxError):
    """3D point with z <= 0 cannot be mapped back to the image plane."""


class DimensionMismatch(SemvoxError):
    """Two rasters that must share a shape do not."""


# alignment

class DegenerateFit(SemvoxError):
    """Masked prediction has (near) zero variance; normal matrix is singular."""


class TooFewPixels(SemvoxError):
    """Fewer than two masked pixels; scale and shift are underdetermined."""


class NoValidPixels(SemvoxError):
    """No masked pixel where both values are positive."""


# voxel

class SpecMismatch(SemvoxError):
    """Grids with different specs cannot be compared."""


# metrics

class EmptyMask(SemvoxError):
    """Metric requested over a mask that selects no pixels."""


class NonPositiveValue(SemvoxError):
    """Ratio metric fed a non-positive prediction or ground-truth value."""


# autodiff

class ShapeMismatch(SemvoxError):
    """Operand shapes incompatible for the requested operation."""


class NonScalarLoss(SemvoxError):
    """backward() requires a scalar loss value."""


class MissingGradients(SemvoxError):
    """Optimizer step requested before backward populated gradients."""


# patchwise

class InvalidPercentage(SemvoxError):
    """train_percentage outside (0, 1]."""


class TrainStepMutatedFrozen(SemvoxError):
    """A train_step callback modified parameters outside the active patch."""


# pseudolabel

class EmptyInput(SemvoxError):
    """An operation that needs at least one element received none."""


class OutOfRange(SemvoxError):
    """Probability values outside [0, 1]."""


class NoCandidates(SemvoxError):
    """Adaptive resolution selection needs a non-empty candidate list."""


class CallbackFailure(SemvoxError):
    """External refinement callback raised; message carries the pixel location."""


# io

class MalformedHeader(SemvoxError):
    """File header does not match the expected format."""


class TruncatedData(SemvoxError):
    """File ended before the payload announced by its header."""


class MaxvalUnsupported(SemvoxError):
    """PGM maxval other than 255."""


class BadMagic(SemvoxError):
    """Binary file does not start with the expected magic bytes."""


class SizeMismatch(SemvoxError):
    """Binary payload length disagrees with the header dimensions."""


class DuplicateFrameId(SemvoxError):
    """Manifest lists the same frame_id twice."""


class ManifestError(SemvoxError):
    """Manifest file is structurally invalid."""
