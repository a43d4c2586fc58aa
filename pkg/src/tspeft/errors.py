"""Exception hierarchy shared across the toolkit."""


class TspeftError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TspeftError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(TspeftError):
    """An operation was called outside its documented contract."""


class DataError(TspeftError):
    """Input data violates a precondition (non-finite values, bad header...)."""


class ConfigError(TspeftError):
    """Invalid configuration value."""


class TrainingDivergence(TspeftError):
    """Non-finite loss or gradient encountered during optimization."""
