"""Exception hierarchy shared by all handrecon modules."""

from __future__ import annotations


class HandReconError(Exception):
    """Base class for library errors."""


class DataError(HandReconError):
    """Malformed input data or schema violation (CLI exit code 2)."""


class NumericalError(HandReconError):
    """Numerical failure during a computation (CLI exit code 3)."""


class InvalidCamera(DataError):
    pass


class NonPositiveDepth(NumericalError):
    pass


class InsufficientViews(NumericalError):
    pass


class DegenerateGeometry(NumericalError):
    pass


class DegenerateShape(NumericalError):
    pass


class ZeroLengthBone(NumericalError):
    pass


class UnobservedBone(DataError):
    def __init__(self, bones):
        self.bones = list(bones)
        super().__init__(f"bones never fully observed: {self.bones}")


class NonFiniteObjective(NumericalError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class EmptyEvaluation(DataError):
    pass


class InvalidSpec(DataError):
    pass


class SchemaError(DataError):
    """Schema violation; ``path`` locates the offending field (e.g. ``frames[3].views.cam0``)."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
