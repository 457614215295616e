"""Exception hierarchy shared across the package."""


class CiseError(Exception):
    """Base class for all package errors."""


class InputError(CiseError, ValueError):
    """Invalid argument value or shape."""


class ConfigurationError(CiseError):
    pass


class ProtocolError(CiseError):
    """An external evaluator produced output that could not be parsed."""


class EvaluatorError(CiseError):
    """An external evaluator exited with a nonzero status."""

    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class StateError(CiseError):
    """Model or training state is unsuitable for the requested operation."""


class UndefinedMetricError(CiseError):
    pass


class UndefinedATEError(CiseError):
    pass


class EmptyCorpusError(CiseError):
    pass


class ReportError(CiseError):
    pass


class NonFiniteLossError(CiseError):
    def __init__(self, message, batch_id=None, dump_path=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.dump_path = dump_path
