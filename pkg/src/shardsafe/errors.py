"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class ShardSafeError(Exception):
    """Base class for all engine errors."""


class DataError(ShardSafeError):
    """Bad or inconsistent input data."""


class FormatError(DataError):
    """A file does not match its declared binary/JSON format."""


class TruncatedError(FormatError):
    """A file ends before its declared payload."""


class NonFiniteError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class UnknownIdError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class GraphError(DataError):
    pass


class TrainingError(ShardSafeError):
    """Training diverged (NaN loss) or was configured inconsistently."""


class EmptyEnsembleError(ShardSafeError):
    """No live adapter remains; callers should use the prototype classifier."""


class BudgetError(ShardSafeError):
    """Privacy parameters are infeasible for the requested budget."""
