class CFALabError(Exception):
    """Base class for errors raised by cfalab."""


class CurationError(CFALabError):
    """A mask or split violates the every-class/every-domain-in-train requirement."""


class ConvergenceError(CFALabError):
    """An iterative solver did not converge; ``trace`` holds the objective history."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class DegenerateRowError(CFALabError):
    """A head row collapsed into the span of the other head."""

    def __init__(self, message: str, rows):
        super().__init__(message)
        self.rows = list(rows)


class ConfigError(CFALabError):
    pass
