"""Exception types shared across the package."""


class ChainFLError(Exception):
    """Base class for all package errors."""


class NumericOverflowError(ChainFLError, ArithmeticError):
    """A gradient, loss or parameter vector became non-finite."""


class AggregationEmptyError(ChainFLError, ValueError):
    pass


class ShapeMismatchError(ChainFLError, ValueError):
    pass


class ValidationError(ChainFLError, ValueError):
    """Input violates a documented precondition."""


class NotFoundError(ChainFLError, KeyError):
    """Content hash is not present in the store."""


class CorruptionError(ChainFLError):
    """Stored bytes no longer hash to their key."""


class LedgerError(ChainFLError):
    pass


class DoubleGenesisError(LedgerError):
    pass


class UnknownApprovalError(LedgerError):
    pass


class PrunedApprovalError(LedgerError):
    pass


class ContractViolation(ChainFLError):
    """Misuse of the simulation engine (e.g. scheduling in the past)."""


class WatchdogError(ChainFLError):
    pass


class IterationError(ChainFLError):
    """A shard could not finish a training iteration."""

    def __init__(self, message, trace_ref=None):
        super().__init__(message)
        self.trace_ref = trace_ref


class ConfigError(ChainFLError, ValueError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
