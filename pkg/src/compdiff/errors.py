"""Exception hierarchy shared by every module."""


class CompDiffError(Exception):
    """Base class for all package errors."""


class ShapeError(CompDiffError, ValueError):
    pass


class NumericalError(CompDiffError, ArithmeticError):
    pass


class GeometryError(CompDiffError, ValueError):
    pass


class ConfigError(CompDiffError, ValueError):
    pass


class ValidationError(CompDiffError, ValueError):
    pass


class StateError(CompDiffError, RuntimeError):
    """Required state (checkpoint, trained weights) is missing."""


class TrainingError(CompDiffError, RuntimeError):
    pass


class RankDeficientError(CompDiffError, ValueError):
    """Pairwise comparison graph is not connected."""
