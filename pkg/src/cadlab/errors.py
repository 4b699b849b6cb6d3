"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CADError(Exception):
    exit_code = 1


class ConfigError(CADError, ValueError):
    exit_code = 2


class NumericError(CADError, ArithmeticError):
    """A non-finite value showed up in a forward or backward pass."""

    exit_code = 3

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDivergedError(NumericError):
    pass


class UndefinedCorrelationError(NumericError):
    pass


class RankDeficiencyError(NumericError):
    pass


class EmptySelectionError(CADError):
    exit_code = 3


class EmptyInputError(CADError, ValueError):
    exit_code = 2


class StaleMaskError(CADError):
    exit_code = 2


class CheckpointError(CADError):
    exit_code = 2
    code = "checkpoint"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class TruncatedPayloadError(CheckpointError):
    code = "truncated_payload"


class HashMismatchError(CheckpointError):
    code = "hash_mismatch"
