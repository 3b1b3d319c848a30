"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CDRNNError(Exception):
    exit_code = 1


class ConfigError(CDRNNError, ValueError):
    """Invalid model specification, hyperparameter or configuration file."""

    exit_code = 2


class DataError(CDRNNError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NumericalError(CDRNNError, ArithmeticError):
    """Non-finite intermediate value.

    ``index`` is the offending response index within the batch, when known.
    """

    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TrainingError(CDRNNError, RuntimeError):
    """Optimization diverged. ``log`` holds the training records so far."""

    exit_code = 4

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log if log is not None else []
