"""Exception hierarchy shared by all voxelseg modules."""


class VoxelSegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VoxelSegError):
    """Invalid or inconsistent run configuration."""


class ParseError(VoxelSegError):
    """Malformed file header or sidecar."""


class MissingModality(VoxelSegError):
    """A case directory lacks one of the four required modalities."""


class ShapeMismatch(VoxelSegError):
    """Array shapes are incompatible for the requested operation."""


class EmptyBrainMask(VoxelSegError):
    """All modalities are identically zero, no brain region exists."""


class DegenerateIntensity(VoxelSegError):
    """Brain-region standard deviation too small to z-score."""


class InvalidLabel(VoxelSegError):
    """Label map contains a value outside {0, 1, 2, 4}."""


class RangeError(VoxelSegError):
    """A value or index lies outside its documented domain."""


class NonFiniteGradient(VoxelSegError):
    """A gradient became NaN or infinite during optimization."""


class CheckpointError(VoxelSegError):
    """Checkpoint file missing or inconsistent with its manifest."""


class EmptyMask(VoxelSegError):
    """A metric that requires nonempty masks received an empty one."""


class EmptyRegion(VoxelSegError):
    """Feature extraction requested on an empty region mask."""


class DegenerateGLCM(VoxelSegError):
    """Region has a single gray level after binning; no co-occurrence texture."""


class EmptyDataset(VoxelSegError):
    """A training routine received no rows/cases."""


class DimensionMismatch(VoxelSegError):
    """Feature vector length differs from what the model was trained on."""


class SpecError(VoxelSegError):
    """Invalid synthetic-phantom specification (e.g. shells not nested)."""
