"""Exception hierarchy shared by all modules."""


class HierLatentError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(HierLatentError, ValueError):
    """A graph, mask or array does not have the expected shape/content."""


class FeasibilityError(HierLatentError, ValueError):
    """Requested graph sizes cannot satisfy the two-pure-children rule."""


class IncomparableError(HierLatentError, ValueError):
    """Two graphs cannot be scored against each other."""


class UnknownNodeError(HierLatentError, LookupError):
    """Unknown node index."""


class ArgumentError(HierLatentError, ValueError):
    """Invalid combination of query sets."""


class RefusalError(HierLatentError, ValueError):
    """The request is outside what a brute-force routine is willing to do."""


class ParseError(HierLatentError, ValueError):
    """Malformed file content.  ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateInputError(HierLatentError, ValueError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column} is constant; cannot standardize")


class InsufficientDataError(HierLatentError, ValueError):
    pass


class OracleInconsistencyError(HierLatentError):
    """The oracle answered a query and its mirror image differently."""

    def __init__(self, query, mirrored, answers):
        self.query = query
        self.mirrored = mirrored
        self.answers = answers
        super().__init__(
            f"r{query} = {answers[0]} but r{mirrored} = {answers[1]}")


class ModelViolationError(HierLatentError):
    """Oracle answers are not consistent with any identifiable graph."""


class QueryBudgetExceeded(HierLatentError):
    def __init__(self, budget, trace=None):
        self.budget = budget
        self.trace = trace
        super().__init__(f"oracle query budget of {budget} exceeded")


class DiagnosticsError(HierLatentError, FloatingPointError):
    """Non-finite loss; ``terms`` holds the per-term values."""

    def __init__(self, terms):
        self.terms = dict(terms)
        desc = ", ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss ({desc})")


class DivergenceError(HierLatentError):
    """Every training restart diverged."""
