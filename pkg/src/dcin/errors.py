"""Exception hierarchy shared by the library and the command line."""


class DcinError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DcinError, ValueError):
    """Invalid option or configuration value (bad bin count, bad ranges, ...)."""


class UsageError(DcinError, ValueError):
    """Inputs violate an operation's preconditions."""


class DataError(DcinError, ValueError):
    """Input data is malformed (zero-norm embedding, bad mask file, ...)."""


class IndexLoadError(DataError):
    """A persisted reference index failed validation."""


class PredictionError(DcinError):
    """A predictor failed or returned an invalid probability mask."""


class EvaluationError(DcinError):
    """Predictions and ground truths could not be matched up."""
