"""Exception taxonomy shared across the toolkit."""


class LowbitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LowbitError):
    """Tensor shapes are incompatible for the requested operation."""


class InputError(LowbitError):
    """Input data violates an operation's preconditions."""


class SpecError(LowbitError):
    """A quantization spec is malformed (e.g. clip_lo >= clip_hi)."""


class ParameterError(LowbitError):
    """A learnable quantization parameter is in an invalid state."""


class ContractError(LowbitError):
    """Operands violate a kernel contract (e.g. wrong quantization axis)."""


class ConfigError(LowbitError):
    """Configuration is malformed, incomplete, or contains unknown keys."""


class NumericalError(LowbitError):
    """A numerical procedure failed (singular matrix, divergence, ...)."""


class DivergenceError(NumericalError):
    """Training loss became non-finite."""
