class SdmError(Exception):
    """Parent class for library-level Exceptions"""


class ShapeError(SdmError):
    """Raised when tensor dimensions don't line up with what an operation expects"""


class CacheError(SdmError):
    """Raised when a forward cache is stale or belongs to a different network"""


class NumericError(SdmError):
    """Raised when NaN or Inf shows up in outputs, gradients or corrector directions"""


class ConfigError(SdmError):
    """Raised when user provides an invalid configuration value or an unknown key"""


class ContractError(SdmError):
    """Raised when an operation is called outside of its contract, e.g. a timestep
    outside the noising band"""


class ClockError(SdmError):
    """Raised when the wall clock goes backwards during a latency benchmark"""


class DatasetParseError(SdmError):
    """Raised when a dataset line can't be parsed into a demonstration"""


class CheckpointFormatError(SdmError):
    """Raised when a checkpoint has an unknown format version or a malformed layout"""
