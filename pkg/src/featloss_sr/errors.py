"""Exception hierarchy shared across the package."""


class FeatlossError(Exception):
    """Base class for all package errors."""


class ShapeError(FeatlossError, ValueError):
    pass


class ConfigError(FeatlossError, ValueError):
    pass


class DataError(FeatlossError, ValueError):
    pass


class CalibrationError(FeatlossError, ValueError):
    pass


class DivergenceError(FeatlossError, RuntimeError):
    pass


class WeightFormatError(DataError):
    pass


class BadMagicError(WeightFormatError):
    pass


class MissingParameterError(WeightFormatError):
    def __init__(self, name):
        super().__init__(f"missing parameter: {name}")
        self.name = name


class DimensionMismatchError(WeightFormatError):
    pass


class TruncatedBlobError(WeightFormatError):
    pass
