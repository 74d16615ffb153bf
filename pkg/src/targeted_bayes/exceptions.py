"""Exception types raised by the estimation pipeline."""


class TargetedBayesError(Exception):
    """Base class for all package errors."""


class DataError(TargetedBayesError, ValueError):
    """Input data does not satisfy the expected structure."""


class SchemaError(DataError):
    """A required CSV column is missing."""


class ConsistencyError(DataError):
    """Outcome presence disagrees with the label indicator."""


class ParseError(DataError):
    """A cell could not be parsed as a number."""


class DegenerateDesignError(DataError):
    """The sampling design leaves the labeled fraction undefined."""


class InvalidFoldError(TargetedBayesError, ValueError):
    pass


class FoldStarvationError(TargetedBayesError, ValueError):
    """A training fold has no labeled units to fit the outcome model on."""


class DegenerateTargetError(TargetedBayesError, ValueError):
    """All targets are identical so the logistic MLE does not exist."""


class NumericalError(TargetedBayesError, ArithmeticError):
    pass


class InvalidMomentsError(TargetedBayesError, ValueError):
    """No Beta distribution has the requested mean and variance."""
