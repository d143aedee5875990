"""Exception hierarchy.

Every domain failure raised by the library derives from
:class:`IncidentFlowError`; the CLI maps it to exit code 1.
"""


class IncidentFlowError(Exception):
    """Base class for all library errors."""


class DomainError(IncidentFlowError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ParseError(IncidentFlowError, ValueError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class DuplicateCellError(ParseError):
    pass


class InsufficientHistoryError(DomainError):
    pass


class InsufficientDonorsError(DomainError):
    pass


class StationLookupError(IncidentFlowError, KeyError):
    def __str__(self):
        return f"unknown station {self.args[0]!r}"


class UnreachableError(DomainError):
    pass


class ShapeError(IncidentFlowError, ValueError):
    pass


class NotFittedError(IncidentFlowError, AttributeError):
    pass


class UnsupportedKindError(IncidentFlowError, TypeError):
    pass


class SingularDesignError(DomainError):
    pass


class EmptyTrainingSetError(DomainError):
    pass


class EmptyEvaluationError(DomainError):
    pass


class DegenerateThresholdError(DomainError):
    pass


class ConfigError(IncidentFlowError, ValueError):
    pass
