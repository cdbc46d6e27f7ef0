"""Exception hierarchy shared across the package."""


class DSVError(Exception):
    """Base class; the CLI prints ``type(exc).__name__`` as the error class."""


class ContractViolation(DSVError, ValueError):
    """An operation was called outside its preconditions."""


class TooShortError(ContractViolation):
    pass


class NonFiniteError(ContractViolation):
    """NaN or infinity where finite numbers are required."""


class FeatureFormatError(DSVError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVariantError(DSVError):
    pass


class VariantMismatchError(DSVError):
    pass


class CheckpointError(DSVError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class TrainingDivergedError(DSVError):
    def __init__(self, message, dump_path=None):
        if dump_path is not None:
            message = f"{message}; offending batch dumped to {dump_path}"
        super().__init__(message)
        self.dump_path = dump_path


class ProtocolError(DSVError):
    """An evaluation protocol cannot be realized for the given data."""


class CorpusMismatchError(DSVError):
    pass


class ConfigError(DSVError):
    pass
