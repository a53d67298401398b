"""Exception types raised across the package."""


class SplatPartsError(Exception):
    """Base class for all package errors."""


class DegenerateTriangle(SplatPartsError):
    pass


class ZeroScale(SplatPartsError):
    pass


class NumericalOverflow(SplatPartsError):
    pass


class TrainingDiverged(SplatPartsError):
    pass


class TopologyMismatch(SplatPartsError):
    pass


class EmptySelection(SplatPartsError):
    pass


class FormatError(SplatPartsError):
    """Malformed or unsupported file contents."""
