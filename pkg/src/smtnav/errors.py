"""Exception types shared across the package."""


class SMTError(Exception):
    """Base class for all package errors."""


class DimensionError(SMTError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SMTError, ArithmeticError):
    """A non-finite value reached an operation that requires finite input."""


class ContractError(SMTError, RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(SMTError, ValueError):
    """A configuration value is invalid or inconsistent."""


class GenerationError(SMTError, RuntimeError):
    """Floorplan generation could not satisfy its constraints."""


class CheckpointError(SMTError, ValueError):
    """A checkpoint file is malformed or incompatible."""


class RolloutError(SMTError, RuntimeError):
    """A simulator fault during episode collection (message carries the step index)."""
