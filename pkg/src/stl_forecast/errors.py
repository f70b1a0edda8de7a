"""Exception types shared across the package."""


class StlError(Exception):
    """Base class for all errors raised by stl_forecast."""


class DimensionError(StlError, ValueError):
    pass


class ConfigError(StlError, ValueError):
    pass


class DataError(StlError, ValueError):
    pass


class UsageError(StlError, RuntimeError):
    pass


class NumericalError(StlError, ArithmeticError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, lr=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


class CheckpointError(StlError, IOError):
    pass
