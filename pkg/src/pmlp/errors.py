"""Exception types raised across the package."""


class PMLPError(Exception):
    """Base class for every error raised by this package."""


class InvalidEdge(PMLPError, ValueError):
    pass


class SelfLoopRejected(PMLPError, ValueError):
    pass


class DimensionError(PMLPError, ValueError):
    pass


class SplitOverlap(PMLPError, ValueError):
    pass


class MissingGraph(PMLPError, ValueError):
    pass


class EmptyMask(PMLPError, ValueError):
    pass


class UnknownModel(PMLPError, ValueError):
    pass


class MissingLabels(PMLPError, ValueError):
    pass


class FactorizationError(PMLPError, ArithmeticError):
    """Raised when a symmetric factorization hits a non-positive pivot.

    ``pivot`` is the 0-based index of the first failing diagonal entry.
    """

    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class NumericalOverflow(PMLPError, ArithmeticError):
    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"non-finite prediction at t={t}")


class DegenerateFeature(PMLPError, ValueError):
    pass


class SchemaError(PMLPError, ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class LabelError(PMLPError, ValueError):
    pass


class StratificationError(PMLPError, ValueError):
    pass
