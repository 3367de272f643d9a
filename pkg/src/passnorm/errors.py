"""Exception types shared across the package."""


class PassnormError(Exception):
    """Base class for package errors."""


class DimensionError(PassnormError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(PassnormError, ValueError):
    """An operation was called outside its contract."""


class UninitializedStatisticsError(PassnormError, RuntimeError):
    """BatchNorm inference requested before any running-statistics update."""


class SpecError(PassnormError, ValueError):
    """A model specification is malformed."""


class KeystoreError(PassnormError, ValueError):
    """Passport-branch parameters or passports do not fit the model."""


class TrainingDiverged(PassnormError, RuntimeError):
    """Training produced a non-finite loss."""


class FormatError(PassnormError, ValueError):
    """A checkpoint or keystore file is malformed.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
