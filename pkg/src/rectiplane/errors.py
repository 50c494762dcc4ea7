"""Exception hierarchy shared by every rectiplane module."""


class RectiplaneError(Exception):
    """Base class for all library errors."""


# geometry
class DegenerateProjection(RectiplaneError, ArithmeticError):
    """A point maps to infinity (homogeneous z is ~0)."""


class SingularMatrix(RectiplaneError, ArithmeticError):
    pass


class DegenerateComposition(RectiplaneError, ArithmeticError):
    pass


class OutOfRange(RectiplaneError, ValueError):
    pass


# imaging
class SpecTooLarge(RectiplaneError, ValueError):
    pass


class ConstraintUnsatisfiable(RectiplaneError, RuntimeError):
    pass


class IoFailure(RectiplaneError, OSError):
    pass


# autodiff
class ShapeMismatch(RectiplaneError, ValueError):
    pass


class DegenerateBatch(RectiplaneError, ValueError):
    pass


class InvalidRate(RectiplaneError, ValueError):
    pass


class NotScalarLoss(RectiplaneError, ValueError):
    pass


# models
class InvalidSize(RectiplaneError, ValueError):
    pass


class ConfigError(RectiplaneError, ValueError):
    pass


# training
class DatasetEmpty(RectiplaneError, ValueError):
    pass


class CheckpointMissing(RectiplaneError, FileNotFoundError):
    pass


class DivergedLoss(RectiplaneError, FloatingPointError):
    pass


class CorruptCheckpoint(RectiplaneError, ValueError):
    pass


class VersionMismatch(RectiplaneError, ValueError):
    pass
