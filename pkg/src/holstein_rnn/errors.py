class HolsteinError(Exception):
    """Base class for all package errors."""


class InvalidInputError(HolsteinError, ValueError):
    pass


class IntegrityError(HolsteinError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConvergenceError(HolsteinError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class DivergenceError(HolsteinError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class DegenerateDataError(HolsteinError, ValueError):
    pass


class StorageError(HolsteinError):
    pass


class VersionMismatchError(StorageError):
    pass


class TruncationError(StorageError):
    pass


class ChecksumError(StorageError):
    pass


class FormatError(StorageError):
    pass
