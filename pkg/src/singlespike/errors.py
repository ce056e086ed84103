"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are not conformable."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ParameterError(ValueError):
    """A model parameter is outside its valid domain."""


class DegenerateModelError(ParameterError):
    """Threshold and resting potential coincide."""


class EncodingError(ValueError):
    """Input is not a valid spike raster or is outside the encoder's range."""


class StateError(RuntimeError):
    """A backward pass was requested without the forward trace it needs."""


class LabelError(ValueError):
    """Targets are not a valid one-hot encoding."""


class RateError(ValueError):
    """Requested firing rate gives a per-bin spike probability above one."""


class FormatError(ValueError):
    """File does not carry the expected magic number or version."""


class LengthError(ValueError):
    """File is shorter than its header promises."""


class ConfigError(ValueError):
    """Invalid run configuration."""
