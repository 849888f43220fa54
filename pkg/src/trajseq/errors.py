"""Exception hierarchy shared by all trajseq modules.

The CLI maps these onto distinct process exit codes (see cli.EXIT_CODES),
so new exception types should subclass one of the three top branches:
ConfigError, DataError, or StateError.
"""


class TrajseqError(Exception):
    """Base class for all trajseq errors."""


class ConfigError(TrajseqError):
    """Invalid configuration: bad dimensions, flags, or option values."""


class ShapeError(ConfigError):
    """Operands with incompatible shapes. Message names both shapes."""


class ContractError(ConfigError):
    """A caller violated an operation's precondition."""


class StepError(ContractError):
    """Diffusion step index outside the schedule range."""


class LengthError(ContractError):
    """Sequence longer than the configured maximum."""


class DataError(TrajseqError):
    """Invalid or insufficient input data."""


class ParseError(DataError):
    """Malformed serialized record. Message names the offending line."""


class HorizonError(DataError):
    """Anchor frame leaves too few history or future frames."""


class InsufficientDataError(DataError):
    """Fewer samples than the operation needs (e.g. clustering K)."""


class UndefinedRateError(DataError):
    """A rate requested over an empty scenario set."""


class StateError(TrajseqError):
    """Operation requires state that is missing (checkpoints, weights)."""


class NonFiniteGradError(StateError):
    """A gradient became NaN/Inf during training. Message names the parameter."""
