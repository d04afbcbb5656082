"""Exception hierarchy shared across the pipeline."""


class ShapeGnnError(Exception):
    """Base class for all package errors."""


class ConfigError(ShapeGnnError, ValueError):
    """Invalid trial/grid configuration or CLI arguments."""


class DataError(ShapeGnnError, ValueError):
    """Dataset cannot be read or violates the NodeTable invariants."""


class SchemaError(DataError):
    """CSV rows disagree with the column layout."""


class DimensionError(ShapeGnnError, ValueError):
    """Operand shapes do not line up."""


class NumericalError(ShapeGnnError, ArithmeticError):
    """A NaN/Inf showed up, or an iterative solver failed to converge."""
