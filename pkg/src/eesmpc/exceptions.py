"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class ParameterError(ValueError):
    """A parameter is outside its admissible range."""


class NumericalError(RuntimeError):
    """A numerical routine failed (e.g. no sign change found while bracketing)."""


class SolverLimitError(RuntimeError):
    """A solver stopped on a time or iteration limit; the answer is indeterminate."""


class NonTerminationError(RuntimeError):
    """An iterative procedure hit its round cap.

    The partial result is kept on ``partial``.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
