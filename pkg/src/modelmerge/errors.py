"""Exception hierarchy shared by every module in the package.

All failures that the command line maps to an exit code derive from
:class:`MergeError`; anything else escaping to the top level is treated
as an internal error.
"""


class MergeError(Exception):
    """Base class for errors raised by this package."""


class FormatError(MergeError):
    """A checkpoint, shard, index, or architecture file is malformed."""


class ConfigError(MergeError):
    """A merge recipe is invalid or references something that does not exist."""


class CapacityError(MergeError):
    """A single tensor does not fit in the configured shard size cap."""


class ShapeMismatch(MergeError):
    """Tensors that must be merged or stacked together disagree in shape."""


class DegenerateWeights(MergeError):
    """Normalization was requested but the merge weights sum to zero."""


class CycleError(MergeError):
    """The task graph is not a DAG."""


class UnknownArchitecture(MergeError):
    """No architecture definition matches the checkpoint's declared family."""
