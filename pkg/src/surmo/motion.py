"""Motion extraction (pose, velocity, trajectory) and UV-space rasterization.

Texel ``(i, j)`` of a ``U x V`` map has its center at
``((i + 0.5) / U, (j + 0.5) / V)`` in atlas coordinates; the first array axis
is ``u``. A texel is covered when its center lies inside (or on the edge of)
some face's UV triangle; overlaps go to the lowest face index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from .errors import GeometryError, TopologyMismatchError
from .geometry import MeshFrame, MeshSequence, face_normals

MOTION_CHANNELS = 9  # pose 3 | velocity 3 | trajectory 3


@dataclass(frozen=True)
class TrajectoryConfig:
    window: int = 5
    weights: tuple = field(default=None)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("trajectory window must be >= 1")
        w = self.weights
        if w is None:
            w = tuple(0.8 ** i for i in range(self.window))
        w = tuple(float(x) for x in w)
        if len(w) != self.window or min(w) <= 0:
            raise ValueError("trajectory weights must be positive, one per window step")
        object.__setattr__(self, "weights", w)

    @classmethod
    def decaying(cls, window: int = 5, decay: float = 0.8) -> "TrajectoryConfig":
        return cls(window, tuple(decay ** i for i in range(window)))


@dataclass(frozen=True, eq=False)
class MotionState:
    pose: np.ndarray
    velocity: np.ndarray
    trajectory: np.ndarray
    frame_index: int


@dataclass(frozen=True, eq=False)
class UvMap:
    data: np.ndarray  # (U, V, C)
    mask: np.ndarray  # (U, V) bool

    @property
    def width(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel_slice(self, start: int, stop: int) -> "UvMap":
        return UvMap(self.data[:, :, start:stop], self.mask)


def compute_velocity(seq: MeshSequence, t: int) -> np.ndarray:
    """Backward difference P_t - P_{t-1}; zero at t = 0."""
    if not 0 <= t < len(seq):
        raise IndexError(f"frame {t} outside sequence of length {len(seq)}")
    if seq.positions.shape[1] != len(seq.uv_coords):
        raise TopologyMismatchError("vertex count differs between frames and atlas")
    if t == 0:
        return np.zeros_like(seq.positions[0])
    return seq.positions[t] - seq.positions[t - 1]


def trajectory_from_velocities(pose: np.ndarray, past_velocities, cfg: TrajectoryConfig) -> np.ndarray:
    """P_t + sum_i lambda_i V_{t-i} / sum(lambda); ``past_velocities[i-1]`` is V_{t-i}.

    Missing entries (shorter list, or None) count as zero velocity while the
    normalizer keeps the full weight sum.
    """
    lam = np.asarray(cfg.weights)
    acc = np.zeros_like(pose, dtype=np.float64)
    for i in range(cfg.window):
        if i < len(past_velocities) and past_velocities[i] is not None:
            acc += lam[i] * past_velocities[i]
    return pose + acc / lam.sum()


def compute_trajectory(seq: MeshSequence, t: int, cfg: TrajectoryConfig | None = None) -> np.ndarray:
    cfg = cfg or TrajectoryConfig()
    past = [compute_velocity(seq, t - i) if t - i >= 0 else None for i in range(1, cfg.window + 1)]
    return trajectory_from_velocities(seq.positions[t], past, cfg)


def extract_motion(seq: MeshSequence, t: int, cfg: TrajectoryConfig | None = None) -> MotionState:
    return MotionState(
        pose=seq.positions[t],
        velocity=compute_velocity(seq, t),
        trajectory=compute_trajectory(seq, t, cfg),
        frame_index=t,
    )


@njit(cache=True)
def _raster_faces(uv, faces, res_u, res_v, face_id, bary):
    for f in range(faces.shape[0]):
        ax, ay = uv[faces[f, 0], 0] * res_u, uv[faces[f, 0], 1] * res_v
        bx, by = uv[faces[f, 1], 0] * res_u, uv[faces[f, 1], 1] * res_v
        cx, cy = uv[faces[f, 2], 0] * res_u, uv[faces[f, 2], 1] * res_v
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        i0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        i1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), res_u - 1)
        j0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        j1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), res_v - 1)
        for i in range(i0, i1 + 1):
            px = i + 0.5
            for j in range(j0, j1 + 1):
                if face_id[i, j] >= 0:
                    continue
                py = j + 0.5
                w0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
                w1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
                w2 = ((ax - px) * (by - py) - (ay - py) * (bx - px)) / area
                if w0 >= 0.0 and w1 >= 0.0 and w2 >= 0.0:
                    face_id[i, j] = f
                    bary[i, j, 0] = w0
                    bary[i, j, 1] = w1
                    bary[i, j, 2] = w2


@dataclass(frozen=True, eq=False)
class UvRaster:
    """Texel-to-face coverage of an atlas at one resolution."""

    face_id: np.ndarray  # (U, V) int, -1 where uncovered
    bary: np.ndarray  # (U, V, 3)
    faces: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.face_id >= 0


def _check_res(resolution):
    if isinstance(resolution, (int, np.integer)):
        resolution = (int(resolution), int(resolution))
    ru, rv = resolution
    if ru <= 0 or rv <= 0:
        raise GeometryError(f"UV resolution must be positive, got {resolution}")
    return int(ru), int(rv)


@lru_cache(maxsize=16)
def _raster_cached(uv_bytes: bytes, faces_bytes: bytes, n_uv: int, n_faces: int, ru: int, rv: int) -> UvRaster:
    uv = np.frombuffer(uv_bytes, dtype=np.float64).reshape(n_uv, 2)
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    face_id = np.full((ru, rv), -1, dtype=np.int64)
    bary = np.zeros((ru, rv, 3), dtype=np.float64)
    _raster_faces(uv, faces, ru, rv, face_id, bary)
    return UvRaster(face_id, bary, faces.copy())


def uv_raster(mesh: MeshFrame, resolution) -> UvRaster:
    ru, rv = _check_res(resolution)
    return _raster_cached(mesh.uv_coords.tobytes(), mesh.faces.tobytes(),
                          len(mesh.uv_coords), len(mesh.faces), ru, rv)


def rasterize_uv(mesh: MeshFrame, attribute: np.ndarray, resolution) -> UvMap:
    """Barycentric interpolation of a per-vertex attribute over the atlas."""
    attr = np.asarray(attribute, dtype=np.float64)
    if attr.ndim == 1:
        attr = attr[:, None]
    if attr.shape[0] != mesh.n_vertices:
        raise GeometryError(f"attribute has {attr.shape[0]} rows for {mesh.n_vertices} vertices")
    r = uv_raster(mesh, resolution)
    m = r.mask
    out = np.zeros(r.face_id.shape + (attr.shape[1],), dtype=np.float64)
    corners = attr[mesh.faces[r.face_id[m]]]  # (n, 3, K)
    out[m] = np.einsum("ni,nik->nk", r.bary[m], corners)
    return UvMap(out, m)


def rasterize_face_attribute(mesh: MeshFrame, values: np.ndarray, resolution) -> UvMap:
    """Flat (per-face constant) rasterization."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape[0] != mesh.n_faces:
        raise GeometryError(f"values have {vals.shape[0]} rows for {mesh.n_faces} faces")
    r = uv_raster(mesh, resolution)
    m = r.mask
    out = np.zeros(r.face_id.shape + (vals.shape[1],), dtype=np.float64)
    out[m] = vals[r.face_id[m]]
    return UvMap(out, m)


def normal_uv(mesh: MeshFrame, resolution) -> UvMap:
    return rasterize_face_attribute(mesh, face_normals(mesh), resolution)


def motion_to_uv(state: MotionState, mesh: MeshFrame, resolution) -> UvMap:
    """Nine-channel [pose | velocity | trajectory] map."""
    attr = np.concatenate([state.pose, state.velocity, state.trajectory], axis=1)
    return rasterize_uv(mesh, attr, resolution)


def next_normal_from_velocity(pose_uv: UvMap, velocity_next_uv: UvMap) -> np.ndarray:
    """Normals of P_t + V_{t+1} from UV-space finite differences.

    The atlas is assumed orientation-preserving, so d/du x d/dv points along
    the outward normal. Texels without both neighbours along an axis use
    one-sided differences; uncovered texels return zero.
    """
    pos = pose_uv.data[..., :3] + velocity_next_uv.data[..., :3]
    m = pose_uv.mask
    du = _masked_diff(pos, m, axis=0)
    dv = _masked_diff(pos, m, axis=1)
    n = np.cross(du, dv)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    out = np.where(length > 0, n / np.where(length > 0, length, 1.0), 0.0)
    return out * m[..., None]


def _masked_diff(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    fwd = np.zeros_like(x)
    bwd = np.zeros_like(x)
    mf = np.zeros_like(m)
    mb = np.zeros_like(m)
    sl_hi = [slice(None)] * 2
    sl_lo = [slice(None)] * 2
    sl_hi[axis] = slice(1, None)
    sl_lo[axis] = slice(None, -1)
    hi, lo = tuple(sl_hi), tuple(sl_lo)
    fwd[lo] = x[hi] - x[lo]
    mf[lo] = m[hi] & m[lo]
    bwd[hi] = x[hi] - x[lo]
    mb[hi] = m[hi] & m[lo]
    both = (mf & mb)[..., None]
    return np.where(both, 0.5 * (fwd + bwd), np.where(mf[..., None], fwd, np.where(mb[..., None], bwd, 0.0)))
