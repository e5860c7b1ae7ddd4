"""Exception types raised across the package."""


class StexprError(Exception):
    """Base class for all package errors."""


class DimensionError(StexprError, ValueError):
    pass


class NumericError(StexprError, ArithmeticError):
    """A non-finite value appeared in a computation."""


class DegenerateError(StexprError, ValueError):
    """Zero-norm vectors, zero-total spots, constant samples and the like."""


class ConfigError(StexprError, ValueError):
    pass


class FormatError(StexprError):
    """An on-disk file does not match its declared layout."""


class ValidationError(StexprError, ValueError):
    pass


class SchemaError(StexprError, ValueError):
    """Slides disagree on gene list or embedding width."""


class EmptyGenesetError(StexprError, ValueError):
    pass


class StructuralError(StexprError, ValueError):
    """A graph violates the structure the model requires."""


class DivergenceError(NumericError):
    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch
