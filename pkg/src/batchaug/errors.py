"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that violate its precondition."""


class ConfigError(ValueError):
    """Invalid experiment configuration (bad key, bad value, bad combination)."""


class IdxFormatError(ValueError):
    """An IDX file is structurally invalid."""


class IdxMagicError(IdxFormatError):
    """An IDX file starts with an unexpected magic number."""


class IdxTruncatedError(IdxFormatError):
    """An IDX file ends before its declared payload is complete."""


class IdxCountMismatch(IdxFormatError):
    """Image and label files disagree on the number of records."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or exploded past the divergence guard."""


class EquivalenceFailure(RuntimeError):
    """Distributed and monolithic training produced different parameters."""


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested on a constant vector."""


class NumericalError(RuntimeError):
    """A numeric routine hit non-finite values or failed to converge."""
