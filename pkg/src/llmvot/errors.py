"""Exception hierarchy shared by all modules.

Every error carries a short ``category`` string; the command line prints it as
the machine-parseable first token of its one-line error report.
"""


class VotError(Exception):
    category = "error"


class InvalidArgumentError(VotError, ValueError):
    category = "invalid-argument"


class UndefinedRatioError(VotError, ValueError):
    category = "undefined-ratio"


class IdentificationError(VotError, ValueError):
    """Raised when a coefficient cannot be identified from the data."""

    category = "identification"

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class RankDeficientError(VotError, ValueError):
    category = "rank-deficient"

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConfigurationError(VotError):
    category = "configuration"


class ValidationError(VotError, ValueError):
    """Config validation failure; ``problems`` lists every issue found."""

    category = "validation"

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TransportError(VotError):
    category = "transport"

    def __init__(self, message, status=None, attempts=0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class RequestError(VotError):
    category = "request"

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class DataIntegrityError(VotError):
    category = "data-integrity"


class StorageError(VotError, OSError):
    category = "storage"
