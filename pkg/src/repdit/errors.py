"""Exception hierarchy. The CLI prints ``<ClassName>: <message>`` on failure."""


class RepDiTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RepDiTError, ValueError):
    pass


class NonFiniteError(RepDiTError, FloatingPointError):
    pass


class ConfigError(RepDiTError, ValueError):
    pass


class CheckpointError(RepDiTError):
    pass


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    """Payload is shorter or longer than the manifest declares."""


class CheckpointShapeError(CheckpointError):
    """Manifest disagrees with the parameter shapes implied by the config."""


class CaptureFormatError(RepDiTError):
    pass


class TrainingDivergedError(RepDiTError):
    pass
