"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class DeformRegError(Exception):
    exit_code = 1


class UsageError(DeformRegError):
    exit_code = 1


class ValidationError(DeformRegError, ValueError):
    exit_code = 2


class DimensionMismatchError(ValidationError):
    pass


class NumericalError(DeformRegError, ArithmeticError):
    exit_code = 3


class VolumeIOError(DeformRegError, OSError):
    exit_code = 4


class MissingFileError(VolumeIOError, FileNotFoundError):
    pass


class SizeMismatchError(VolumeIOError):
    """Payload byte count does not match the header dims."""


class InvalidDimsError(VolumeIOError):
    pass


class NonFiniteError(VolumeIOError):
    pass


class HeaderError(VolumeIOError):
    pass
