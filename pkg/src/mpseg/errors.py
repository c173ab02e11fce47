"""Exception types shared across the pipeline."""


class MpsegError(Exception):
    """Base class for all pipeline errors."""


# --- volume I/O ---

class MalformedHeaderError(MpsegError):
    """NIfTI header fails a structural check (magic, dim[0], pixdim)."""


class UnsupportedDatatypeError(MpsegError):
    """NIfTI datatype code outside the supported {uint8, int16, float32} set."""


class TruncatedFileError(MpsegError):
    """Data section is shorter than the header-declared shape implies."""


class IoFailureError(MpsegError):
    """Underlying OS write/read failure."""


class ShapeMismatchError(MpsegError):
    """Arrays or volumes that must share a grid disagree on shape/spacing."""


class MissingModalityError(MpsegError):
    """A required modality file is absent."""


# --- multiplanar geometry ---

class DegenerateAxisError(MpsegError):
    """View axis has (near-)zero length."""


class AngleInfeasibleError(MpsegError):
    """View rejection sampling exhausted its attempt budget."""


class ExtentOverflowError(MpsegError):
    """Requested resampling grid exceeds the configured voxel budget."""


class GeometryMismatchError(MpsegError):
    """PlaneStack geometry extent disagrees with the probability stack shape."""


# --- network ---

class InvalidConfigError(MpsegError):
    """Network or run configuration violates its invariants."""


class ShapeError(MpsegError):
    """Tensor shape incompatible with the network contract."""


class MissingActivationsError(MpsegError):
    """backward() called without a preceding train-mode forward()."""


class CheckpointError(MpsegError):
    """Checkpoint file is corrupt or has a bad magic."""


# --- training / evaluation ---

class TooFewSubjectsError(MpsegError):
    """Fewer subjects than cross-validation folds."""


class LabelOutOfRangeError(MpsegError):
    """A label value falls outside [0, num_classes)."""


class EmptyListError(MpsegError):
    """An aggregate was requested over an empty collection."""


class UnknownLabelError(MpsegError):
    """A mask value is not part of its label scheme."""


class TumorDoesNotFitError(MpsegError):
    """Phantom tumor placement failed within the retry budget."""


class ConfigError(MpsegError):
    """Run configuration file is missing, unparsable, or inconsistent."""
