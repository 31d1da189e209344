"""Exception hierarchy shared across the package."""


class SurmoError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(SurmoError, ValueError):
    pass


class DegenerateFaceError(GeometryError):
    def __init__(self, face_index: int):
        super().__init__(f"face {face_index} has zero area")
        self.face_index = face_index


class TopologyMismatchError(GeometryError):
    pass


class ShapeError(SurmoError, ValueError):
    """Incompatible operand shapes for a tensor operation."""


class FormatError(SurmoError):
    """A file does not follow the expected layout."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class TrainingDiverged(SurmoError, RuntimeError):
    pass
