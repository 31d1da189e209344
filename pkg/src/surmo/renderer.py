"""Surface-guided volume rendering of a triplane into a feature image.

Pixel ``(x, y)`` is addressed row-major as ``y * width + x`` and its ray
passes through the pixel center ``(x + 0.5, y + 0.5)``. Cameras follow the
OpenCV convention: +z forward, +y down in image space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import FaceBvh, MeshFrame, SurfaceLocalCoord, ray_aabb, surface_local_coords
from .tensor import Tensor, make, scatter_rows
from .triplane import SurfaceTriplane, VolumetricTriplane, sample_surface_features, sample_volume_features


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray  # world-to-camera (3, 4)
    width: int
    height: int

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "extrinsic", ext)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = ext[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same view at a resized image; ``factor`` scales the pixel grid."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return replace(self, fx=self.fx * factor, fy=self.fy * factor, cx=self.cx * factor,
                       cy=self.cy * factor, width=w, height=h)

    def project(self, points: np.ndarray):
        """World points to (pixel x, pixel y, depth)."""
        pc = points @ self.rotation.T + self.translation
        z = pc[:, 2]
        return self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy, z

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        return cls(fx, fy, cx, cy, np.concatenate([r, (-r @ eye)[:, None]], axis=1), width, height)


def pixel_rays(cam: Camera, px: np.ndarray, py: np.ndarray):
    """Rays through arbitrary pixel-plane positions (not offset by 0.5)."""
    d = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px, dtype=np.float64)], axis=-1)
    d = d @ cam.rotation  # R^T d for row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


def generate_rays(cam: Camera):
    """Per-pixel origins and unit directions, (H * W, 3) each."""
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return pixel_rays(cam, xs.ravel() + 0.5, ys.ravel() + 0.5)


@dataclass(eq=False)
class RaySampleSet:
    """Samples along a batch of rays.

    Every array has one entry per sample. ``slot`` is the sample's depth rank
    on its ray; ``valid`` marks samples inside the surface shell. Surface
    coordinates (face, u, v, h) are NaN / -1 where not computed.
    """

    ray_index: np.ndarray
    slot: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    points: np.ndarray
    valid: np.ndarray
    face: np.ndarray
    u: np.ndarray
    v: np.ndarray
    h: np.ndarray
    n_rays: int
    n_slots: int
    directions: np.ndarray = field(default=None)  # per-ray (n_rays, 3)
    n_in_box: int = 0

    def __len__(self) -> int:
        return len(self.t)

    def subset(self, keep: np.ndarray) -> "RaySampleSet":
        return replace(
            self, ray_index=self.ray_index[keep], slot=self.slot[keep], t=self.t[keep],
            delta=self.delta[keep], points=self.points[keep], valid=self.valid[keep],
            face=self.face[keep], u=self.u[keep], v=self.v[keep], h=self.h[keep],
        )

    def sorted(self) -> "RaySampleSet":
        """Order samples by (ray, depth) and renumber slots by depth rank."""
        order = np.lexsort((self.t, self.ray_index))
        out = self.subset(order)
        starts = np.searchsorted(out.ray_index, out.ray_index, side="left")
        out.slot = np.arange(len(out)) - starts
        return out

    def coords(self) -> SurfaceLocalCoord:
        return SurfaceLocalCoord(self.face, self.u, self.v, self.h)


def sample_points_filtered(origins, dirs, mesh: MeshFrame, bvh: FaceBvh, h_max: float, n_samples: int,
                           rng: np.random.Generator | None = None, filter_far: bool = True) -> RaySampleSet:
    """Stratified samples inside the mesh box dilated by ``h_max``.

    With ``rng`` each stratum is jittered, otherwise stratum midpoints are
    used. Samples farther than ``h_max`` from the surface are flagged
    invalid. With ``filter_far`` (the default) they are dropped and their
    surface coordinates are never computed; without it every in-box sample is
    kept and gets coordinates.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n_rays = len(origins)
    lo, hi = mesh.bounds()
    tn, tf, hit = ray_aabb(origins, dirs, lo - h_max, hi + h_max)
    rays = np.nonzero(hit)[0]
    step = (tf[rays] - tn[rays]) / n_samples
    k = np.arange(n_samples)
    jitter = 0.5 if rng is None else rng.random((len(rays), n_samples))
    t = tn[rays, None] + (k[None, :] + jitter) * step[:, None]
    ray_index = np.repeat(rays, n_samples)
    slot = np.tile(k, len(rays))
    t = t.ravel()
    delta = np.repeat(step, n_samples)
    pts = origins[ray_index] + t[:, None] * dirs[ray_index]
    c = surface_local_coords(bvh, mesh, pts, max_distance=h_max if filter_far else np.inf)
    valid = (c.face_index >= 0) & (np.abs(c.h) <= h_max)
    s = RaySampleSet(ray_index, slot, t, delta, pts, valid, c.face_index, c.u, c.v, c.h,
                     n_rays, n_samples, dirs, len(t))
    return s.subset(valid) if filter_far else s


def composite(sigma: Tensor, color: Tensor, delta: np.ndarray):
    """Alpha-composite dense (R, S) densities and (R, S, C) colors.

    Returns per-ray feature (R, C) and accumulated opacity (R,), both
    differentiable in ``sigma``; the feature also in ``color``.
    """
    sd = sigma.data.astype(np.float64) * delta
    cum = np.cumsum(sd, axis=1)
    trans_after = np.exp(-cum)  # T_{j+1}
    trans = np.exp(-(cum - sd))  # T_j
    alpha = 1.0 - np.exp(-sd)
    w = trans * alpha
    feat = np.einsum("rs,rsc->rc", w, color.data).astype(color.dtype)
    acc = w.sum(axis=1)
    t_end = trans_after[:, -1]

    def back_feat(g):
        gc = g.astype(np.float64)
        proj = np.einsum("rsc,rc->rs", color.data, gc)  # g . c_j
        wp = w * proj
        tail = np.cumsum(wp[:, ::-1], axis=1)[:, ::-1] - wp  # sum_{k>j} w_k (g . c_k)
        gs = delta * (trans_after * proj - tail)
        gcol = w[:, :, None] * gc[:, None, :]
        return gs.astype(sigma.dtype), gcol.astype(color.dtype)

    def back_acc(g):
        return ((g[:, None] * delta * t_end[:, None]).astype(sigma.dtype),)

    return (make(feat, (sigma, color), back_feat),
            make(acc.astype(sigma.dtype), (sigma,), back_acc))


def dense_layout(samples: RaySampleSet):
    """Map samples to rows of a compact (rays_with_samples * S) grid."""
    rays, local = np.unique(samples.ray_index, return_inverse=True)
    rows = local * samples.n_slots + samples.slot
    delta = np.zeros((len(rays), samples.n_slots))
    delta.reshape(-1)[rows] = samples.delta
    # empty slots still need a positive length; their density is zero
    delta[delta == 0] = 1.0
    return rays, rows, delta


def integrate_volume(samples: RaySampleSet, color: Tensor, sigma: Tensor):
    """Composite per-sample (c, sigma) along each ray.

    Returns (feature (n_rays, C), opacity (n_rays,)) with zeros for rays
    without samples. Samples are ordered by ``slot``; call
    :meth:`RaySampleSet.sorted` first if storage order is arbitrary.
    """
    rays, rows, delta = dense_layout(samples)
    r, s = len(rays), samples.n_slots
    c = color.shape[1]
    sig = scatter_rows(sigma.reshape(-1, 1), rows, r * s).reshape(r, s)
    col = scatter_rows(color, rows, r * s).reshape(r, s, c)
    feat, acc = composite(sig, col, delta)
    return (scatter_rows(feat, rays, samples.n_rays),
            scatter_rows(acc.reshape(-1, 1), rays, samples.n_rays).reshape(samples.n_rays))


@dataclass
class RenderConfig:
    n_samples: int = 64
    filter_far: bool = True


@dataclass(eq=False)
class RenderOutput:
    features: Tensor  # (H, W, C)
    opacity: Tensor  # (H, W)
    n_field_evals: int
    n_samples_in_box: int


def query_field(model, triplane, samples: RaySampleSet):
    """Radiance-field outputs at the samples; zero density outside the shell."""
    if isinstance(triplane, VolumetricTriplane):
        z = sample_volume_features(triplane, samples.points)
    else:
        z = sample_surface_features(triplane, samples.coords())
    d = samples.directions[samples.ray_index]
    color, sigma = model.radiance_field(z, d)
    if not samples.valid.all():
        sigma = sigma * Tensor(samples.valid.astype(sigma.dtype))
    return color, sigma


def render_feature_image(model, mesh: MeshFrame, bvh: FaceBvh, cam: Camera, config: RenderConfig | None = None,
                         triplane=None, rng: np.random.Generator | None = None, samples: RaySampleSet | None = None,
                         h_max: float | None = None) -> RenderOutput:
    """Render the low-resolution feature image I_F for one camera.

    ``triplane`` is the already-encoded feature triplane for this frame.
    Precomputed ``samples`` (from :func:`sample_points_filtered` on this
    camera's rays) skip the geometric queries.
    """
    config = config or RenderConfig()
    if h_max is None:
        h_max = triplane.h_max if isinstance(triplane, SurfaceTriplane) else model.config.h_max
    if samples is None:
        o, d = generate_rays(cam)
        samples = sample_points_filtered(o, d, mesh, bvh, h_max, config.n_samples, rng, config.filter_far)
    if len(samples) == 0:
        c = model.config.feature_channels
        dt = model.dtype
        return RenderOutput(Tensor(np.zeros((cam.height, cam.width, c), dt)),
                            Tensor(np.zeros((cam.height, cam.width), dt)), 0, samples.n_in_box)
    color, sigma = query_field(model, triplane, samples)
    feat, acc = integrate_volume(samples, color, sigma)
    return RenderOutput(feat.reshape(cam.height, cam.width, -1), acc.reshape(cam.height, cam.width),
                        len(samples), samples.n_in_box)
