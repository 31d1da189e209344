"""Surface-based and volumetric triplanes.

A triplane stores three feature planes in one ``(R, R, 3 * C)`` tensor:
channels ``[0, C)`` are the first plane, ``[C, 2C)`` the second and
``[2C, 3C)`` the third. For the surface variant those are ``x_uv``,
``x_uh`` and ``x_hv``; for the volumetric variant ``xy``, ``xz``, ``yz``.

Plane lookups are bilinear over texel centers with coordinates clamped to
[0, 1] (border texels extend to the edge).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import FaceBvh, MeshFrame, SurfaceLocalCoord, surface_local_coords
from .tensor import Tensor, as_tensor, concat, make


def _axis_weights(a: np.ndarray, n: int):
    """Clamped texel-center interpolation along one axis.

    Returns (lo index, hi index, frac, d frac / d a).
    """
    inside = (a >= 0.0) & (a <= 1.0)
    x = np.clip(a, 0.0, 1.0) * n - 0.5
    i0 = np.floor(x)
    frac = x - i0
    i0 = i0.astype(np.int64)
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    dfrac = np.where(inside & (lo != hi), float(n), 0.0)
    return lo, hi, frac, dfrac


def bilinear_stencil(a: np.ndarray, b: np.ndarray, shape):
    """Texel indices (N, 4) and weights (N, 4) of bilinear lookups."""
    n0, n1 = shape
    i0, i1, fa, _ = _axis_weights(np.asarray(a, dtype=np.float64), n0)
    j0, j1, fb, _ = _axis_weights(np.asarray(b, dtype=np.float64), n1)
    idx = np.stack([i0 * n1 + j0, i0 * n1 + j1, i1 * n1 + j0, i1 * n1 + j1], axis=1)
    w = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=1)
    return idx, w


def bilinear_lookup(plane: np.ndarray, a, b) -> np.ndarray:
    """Non-differentiable bilinear lookup, for numpy callers."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    idx, w = bilinear_stencil(a, b, plane.shape[:2])
    flat = plane.reshape(-1, plane.shape[2])
    return np.einsum("nk,nkc->nc", w, flat[idx])


def sample_plane(plane: Tensor, a, b) -> Tensor:
    """Bilinear samples (N, C) of an (R0, R1, C) plane at coordinates (a, b).

    Differentiable with respect to the plane and, when given as tensors, the
    coordinates.
    """
    plane = as_tensor(plane)
    at, bt = isinstance(a, Tensor), isinstance(b, Tensor)
    av = np.atleast_1d(np.asarray(a.data if at else a, dtype=np.float64))
    bv = np.atleast_1d(np.asarray(b.data if bt else b, dtype=np.float64))
    n0, n1, c = plane.shape
    i0, i1, fa, dfa = _axis_weights(av, n0)
    j0, j1, fb, dfb = _axis_weights(bv, n1)
    flat = plane.data.reshape(-1, c)
    v00, v01 = flat[i0 * n1 + j0], flat[i0 * n1 + j1]
    v10, v11 = flat[i1 * n1 + j0], flat[i1 * n1 + j1]
    fa_, fb_ = fa[:, None], fb[:, None]
    out = (1 - fa_) * ((1 - fb_) * v00 + fb_ * v01) + fa_ * ((1 - fb_) * v10 + fb_ * v11)
    out = out.astype(plane.dtype)
    n = len(av)

    def back(g):
        g64 = g.astype(np.float64)
        rows = np.repeat(np.arange(n), 4)
        cols = np.stack([i0 * n1 + j0, i0 * n1 + j1, i1 * n1 + j0, i1 * n1 + j1], axis=1).ravel()
        w = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=1).ravel()
        wmat = sp.csr_matrix((w, (rows, cols)), shape=(n, n0 * n1))
        gplane = np.asarray(wmat.T @ g64).reshape(plane.shape).astype(plane.dtype)
        ga = gb = None
        if at:
            d = (1 - fb_) * (v10 - v00) + fb_ * (v11 - v01)
            ga = ((g64 * d).sum(axis=1) * dfa).astype(a.dtype).reshape(a.shape)
        if bt:
            d = (1 - fa_) * (v01 - v00) + fa_ * (v11 - v10)
            gb = ((g64 * d).sum(axis=1) * dfb).astype(b.dtype).reshape(b.shape)
        return gplane, ga, gb

    parents = [plane, a if at else Tensor(av), b if bt else Tensor(bv)]
    return make(out, parents, back)


def touched_texels(a, b, shape) -> np.ndarray:
    """Boolean mask of texels receiving nonzero bilinear weight."""
    idx, w = bilinear_stencil(a, b, shape)
    touched = np.zeros(shape[0] * shape[1], dtype=bool)
    touched[idx[w > 0]] = True
    return touched.reshape(shape)


class _Triplane:
    features: Tensor

    @property
    def channels(self) -> int:
        return self.features.shape[2] // 3

    @property
    def resolution(self) -> tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    def plane(self, k: int) -> Tensor:
        c = self.channels
        return self.features[:, :, k * c:(k + 1) * c]

    def _sample(self, coords) -> Tensor:
        return concat([sample_plane(self.plane(k), a, b) for k, (a, b) in enumerate(coords)], axis=1)


@dataclass(eq=False)
class SurfaceTriplane(_Triplane):
    features: Tensor
    h_max: float

    def __post_init__(self):
        if self.h_max <= 0:
            raise ValueError("h_max must be positive")
        if self.features.shape[2] % 3:
            raise ValueError("triplane channel count must be divisible by 3")

    @property
    def plane_uv(self) -> Tensor:
        return self.plane(0)

    @property
    def plane_uh(self) -> Tensor:
        return self.plane(1)

    @property
    def plane_hv(self) -> Tensor:
        return self.plane(2)

    def normalized_h(self, h) -> np.ndarray:
        return np.clip((np.asarray(h, dtype=np.float64) + self.h_max) / (2.0 * self.h_max), 0.0, 1.0)

    def plane_coords(self, u, v, h):
        hn = self.normalized_h(h)
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return [(u, v), (u, hn), (hn, v)]


@dataclass(eq=False)
class VolumetricTriplane(_Triplane):
    """Axis-aligned planes spanning a world-space box."""

    features: Tensor
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("volumetric triplane box is degenerate")

    def plane_coords(self, points):
        q = (np.asarray(points, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        x, y, z = q[:, 0], q[:, 1], q[:, 2]
        return [(x, y), (x, z), (y, z)]


def sample_surface_features(tp: SurfaceTriplane, c: SurfaceLocalCoord) -> Tensor:
    """Per-point feature cat[x_uv(u, v), x_uh(u, h), x_hv(h, v)]."""
    u = np.atleast_1d(c.u)
    v = np.atleast_1d(c.v)
    h = np.atleast_1d(c.h)
    return tp._sample(tp.plane_coords(u, v, h))


def sample_volume_features(tp: VolumetricTriplane, points) -> Tensor:
    return tp._sample(tp.plane_coords(np.atleast_2d(points)))


def shell_box(mesh: MeshFrame, h_max: float) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = mesh.bounds()
    return lo - h_max, hi + h_max


def sample_shell_points(mesh: MeshFrame, bvh: FaceBvh, h_max: float, n: int, rng: np.random.Generator):
    """Uniform points in the dilated box, kept when within h_max of the surface."""
    lo, hi = shell_box(mesh, h_max)
    pts, coords = [], []
    have = 0
    while have < n:
        cand = rng.uniform(lo, hi, size=(max(4 * (n - have), 64), 3))
        c = surface_local_coords(bvh, mesh, cand, max_distance=h_max)
        keep = np.nonzero(c.face_index >= 0)[0][: n - have]
        pts.append(cand[keep])
        coords.append((c.face_index[keep], c.u[keep], c.v[keep], c.h[keep]))
        have += len(keep)
    f, u, v, h = (np.concatenate(x) for x in zip(*coords))
    return np.concatenate(pts), SurfaceLocalCoord(f, u, v, h)


@dataclass(frozen=True)
class OccupancyReport:
    per_plane: tuple[float, float, float]

    @property
    def fraction(self) -> float:
        return float(np.mean(self.per_plane))


def occupancy_stats(tp, mesh: MeshFrame, bvh: FaceBvh, n_samples: int,
                    rng: np.random.Generator | None = None, h_max: float | None = None) -> OccupancyReport:
    """Fraction of texels touched when sampling ``n_samples`` shell points.

    Works for both triplane kinds; the shell half-width is the surface
    triplane's ``h_max`` unless given.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    if h_max is None:
        h_max = tp.h_max
    pts, c = sample_shell_points(mesh, bvh, h_max, n_samples, rng)
    if isinstance(tp, SurfaceTriplane):
        coords = tp.plane_coords(c.u, c.v, c.h)
    else:
        coords = tp.plane_coords(pts)
    res = tp.resolution
    fr = tuple(float(touched_texels(a, b, res).mean()) for a, b in coords)
    return OccupancyReport(fr)
