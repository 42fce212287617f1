"""Exception hierarchy shared by all modules."""


class RegeqError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(RegeqError, ValueError):
    pass


class InvariantViolation(RegeqError, ValueError):
    """A domain object violates one of its documented invariants."""


class SchemaError(RegeqError, ValueError):
    """A case or config file does not follow the documented schema."""


class ParseError(RegeqError, ValueError):
    pass


class MissingColumn(ParseError):
    pass


class NonfiniteInput(RegeqError, ValueError):
    pass


class NonpositiveRadius(RegeqError, ValueError):
    pass


class NonpositiveOracleRevenue(RegeqError, ValueError):
    pass


class SampleMismatch(RegeqError, ValueError):
    pass


class ContractError(RegeqError):
    """An operation was called while its precondition does not hold."""


class SolverFailure(RegeqError):
    """A QP solve ended in a non-optimal state.

    The backend status is kept on ``status`` so callers can map it to an
    exit code or a report entry.
    """

    def __init__(self, message, status=None, sample_ids=None):
        super().__init__(message)
        self.status = status
        self.sample_ids = sample_ids


class Infeasible(SolverFailure):
    pass


class UnboundedOrNumerical(SolverFailure):
    pass


class NegativeDual(RegeqError):
    """An extracted price dual is negative beyond tolerance."""


class MaxIterReached(RegeqError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
