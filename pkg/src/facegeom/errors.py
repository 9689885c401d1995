"""Exception hierarchy.

Input problems derive from :class:`InputError` and solver problems from
:class:`SolverError`; the CLI maps them to exit codes 2 and 3.
"""


class FaceGeomError(Exception):
    """Base class for all package errors."""


class InputError(FaceGeomError):
    pass


class SolverError(FaceGeomError):
    pass


class InvalidMesh(InputError):
    pass


class DegenerateTriangle(InputError):
    pass


class ZeroLengthEdge(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class MalformedHeader(InputError):
    pass


class MaskChannelConflict(InputError):
    pass


class InvalidMaps(InputError):
    pass


class EmptyFace(InputError):
    pass


class NoValidPixels(InputError):
    pass


class TooFewPairs(InputError):
    pass


class TooFewPixels(InputError):
    pass


class EmptyPairSet(InputError):
    pass


class DegenerateSample(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class NotConverged(SolverError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NoActivePairs(SolverError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class EmptyFaceWarning(UserWarning):
    pass
