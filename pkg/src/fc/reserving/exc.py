class ReservingError(RuntimeError):
    pass


class ConfigurationError(ReservingError):
    """A configuration value or document is invalid."""

    pass


class SchemaError(ConfigurationError):
    """The input data does not match its declared schema."""

    pass


class DuplicateRecordError(ReservingError):
    pass


class ConsistencyError(ReservingError):
    """A development record violates the record invariants.

    `row` is the 1-based data row (header excluded) if known.

    """

    def __init__(self, message, row=None):
        if row is not None:
            message = "row {}: {}".format(row, message)
        super().__init__(message)
        self.row = row


class DegenerateExposureError(ReservingError):
    def __init__(self, message, dev_year=None):
        super().__init__(message)
        self.dev_year = dev_year


class DomainError(ReservingError):
    """Responses outside of the support of a family."""

    pass


class ConvergenceError(ReservingError):
    """The optimizer did not converge or the data is separated."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PredictionError(ReservingError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class EvaluationError(ReservingError):
    pass


class ModelSpecError(ConfigurationError):
    pass


class FittingError(ReservingError):
    pass


class StateError(ReservingError):
    pass


class EstimabilityError(ReservingError):
    def __init__(self, message, dev_year=None):
        super().__init__(message)
        self.dev_year = dev_year


class NestingError(ReservingError):
    """The full model fits worse than the reduced model it should nest."""

    pass


class InputError(ReservingError):
    pass


class UndefinedError(ReservingError):
    pass


class SummaryError(UndefinedError):
    pass
