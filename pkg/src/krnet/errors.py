"""Exception hierarchy shared by every krnet module."""


class KrnetError(Exception):
    pass


class ConfigError(KrnetError, ValueError):
    pass


class ShapeError(KrnetError, ValueError):
    pass


class SizeError(ShapeError):
    pass


class DegenerateBatchError(KrnetError, ValueError):
    """Batch statistics requested over fewer than two elements per channel."""


class StateError(KrnetError, RuntimeError):
    pass


class NoiseSpecError(ConfigError):
    pass


class DataError(KrnetError):
    pass


class EmptyEpochError(DataError):
    pass


class PnmError(DataError):
    pass


class PnmMagicError(PnmError):
    pass


class PnmMaxvalError(PnmError):
    pass


class PnmTruncatedError(PnmError):
    pass


class CheckpointError(KrnetError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
