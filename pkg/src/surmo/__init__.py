"""Surface-based 4D motion modeling: motion extraction, surface triplanes,
motion decoding and surface-guided volume rendering on CPU."""

from .errors import (
    ChecksumError,
    FormatError,
    GeometryError,
    MagicError,
    ShapeError,
    SurmoError,
    TrainingDiverged,
    TruncatedError,
    VersionError,
)
from .geometry import MeshFrame, MeshSequence, SurfaceLocalCoord, build_bvh, local_to_world, surface_local_coords
from .model import ModelConfig, SurmoModel
from .renderer import Camera

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ChecksumError",
    "FormatError",
    "GeometryError",
    "MagicError",
    "MeshFrame",
    "MeshSequence",
    "ModelConfig",
    "ShapeError",
    "SurfaceLocalCoord",
    "SurmoError",
    "SurmoModel",
    "TrainingDiverged",
    "TruncatedError",
    "VersionError",
    "build_bvh",
    "local_to_world",
    "surface_local_coords",
]
