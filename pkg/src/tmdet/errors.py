"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Shapes or settings of layers/maps do not line up."""


class FeatureFormatError(ValueError):
    """A TMRF/TMRC file has a bad magic, version or header."""


class GenerationError(RuntimeError):
    """The synthetic generator could not satisfy its placement constraints."""


class NonFiniteError(ArithmeticError):
    """A forward value or loss that must be finite is NaN/Inf."""
