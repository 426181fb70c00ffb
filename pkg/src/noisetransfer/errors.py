"""Exception hierarchy shared by every module of the package."""


class NoiseTransferError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(NoiseTransferError, ValueError):
    """An argument violated a documented precondition."""


class ConfigError(ValidationError):
    """An experiment configuration is malformed or violates an invariant."""


class TrainingDivergedError(NoiseTransferError, RuntimeError):
    """Training produced a non-finite loss."""


class ModelFileError(NoiseTransferError):
    """Base class for model/ensemble persistence errors."""


class VersionMismatchError(ModelFileError):
    pass


class MalformedFileError(ModelFileError):
    pass


class ShapeInconsistencyError(ModelFileError):
    pass


class IdxFormatError(NoiseTransferError, ValueError):
    """Base class for IDX parsing errors."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass
