"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward run twice on one tape)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ValueError):
    """A dataset could not be loaded or is unusable as given."""


class SplitError(DataError):
    """A train/val/test split cannot accommodate a single window."""
