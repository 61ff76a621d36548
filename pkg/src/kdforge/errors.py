"""Exception hierarchy.

Every failure mode raised by the library derives from :class:`KDForgeError`,
grouped so the CLI can map them onto stable exit codes (usage 1, data 2,
numeric divergence 3).
"""


class KDForgeError(Exception):
    """Base class for all library errors."""


class UsageError(KDForgeError):
    """Bad configuration or invalid arguments (CLI exit code 1)."""


class ConfigError(UsageError):
    """A hyperparameter or option is outside its documented range."""


class DataError(KDForgeError):
    """Problems with input data or files (CLI exit code 2)."""


class DimensionError(DataError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(DataError):
    """A non-finite value reached an operation that requires finite input."""


class LabelError(DataError):
    """A target label is outside the valid class range."""


class InputError(DataError):
    """Unusable input: empty corpus, malformed stream, mismatched lengths."""


class VocabError(DataError):
    """A token id is not present in the vocabulary."""


class BalanceError(DataError):
    """Class balancing was requested on a single-class dataset."""


class SplitError(DataError):
    """A stratified split allocation exceeds the available class size."""


class DistributionError(DataError):
    """A KL-divergence input does not sum to one."""


class CompatibilityError(DataError):
    """Teacher and student models disagree on a shared dimension."""


class StateError(KDForgeError):
    """An operation was used out of order (e.g. backward before forward)."""


class DivergenceError(KDForgeError):
    """Training produced a non-finite loss or metric (CLI exit code 3)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(DataError):
    """Base class for checkpoint (de)serialization failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint payload ended before the declared length."""
