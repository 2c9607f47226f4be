"""Exception taxonomy shared across the package."""


class InputError(ValueError):
    """Malformed or dimensionally inconsistent operation inputs."""


class NumericError(ArithmeticError):
    """Non-finite values where finite numbers are required."""


class ConfigError(ValueError):
    """Inconsistent module/filter configuration."""


class SchemaError(ValueError):
    """Experiment config failed schema validation."""


class IngestionError(RuntimeError):
    """Dataset could not be loaded from disk."""


class FrozenExpertError(RuntimeError):
    """An expert backbone was mutated after being frozen."""
