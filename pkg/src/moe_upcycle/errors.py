"""Exception hierarchy shared by all modules."""


class UpcycleError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(UpcycleError, ValueError):
    """Tensor shapes are incompatible."""


class NumericError(UpcycleError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ArgumentError(UpcycleError, ValueError):
    """An argument is outside its valid range."""


class ConfigError(UpcycleError, ValueError):
    """A model, MoE or upcycle configuration violates a constraint."""


class FormatError(UpcycleError):
    """A checkpoint file has a bad magic string or unsupported version."""


class CorruptionError(UpcycleError):
    """A checkpoint header is internally inconsistent."""


class CheckpointIOError(UpcycleError, OSError):
    """A checkpoint file is truncated or unreadable."""


class TrainingDivergedError(UpcycleError, ArithmeticError):
    """The training loss became non-finite."""
