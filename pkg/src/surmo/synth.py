"""Deterministic toy data: an articulated tube body with a lagging skirt
flap, a procedural texture, a camera ring and a z-buffer reference renderer.

The body sways sideways and swings its arms with a common period, so every
pose recurs twice per period with opposite velocity. The skirt flap of the
clothed mesh follows the torso velocity a few frames back, which makes the
ground-truth appearance depend on dynamics, not on pose alone. The model is
given the unclothed body only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from numba import njit

from .geometry import MeshFrame, MeshSequence, face_normals
from .renderer import Camera
from .triplane import bilinear_lookup


@dataclass
class ToyBodySpec:
    segments: int = 3  # torso, then left and right arm
    frames: int = 60
    fps: float = 30.0
    period: float = 30.0  # frames per swing cycle
    sway_amplitude: float = 0.08
    arm_amplitude: float = 0.6  # radians
    flap_amplitude: float = 0.08
    flap_lag: float = 3.0  # frames
    flap_height: float = 0.4
    n_around: int = 20
    n_along: int = 8
    torso_radius: tuple = (0.24, 0.15)
    torso_height: float = 1.0
    arm_radius: float = 0.085
    arm_length: float = 0.65
    shoulder: tuple = (0.35, 0.92)
    texture_seed: int = 0
    texture_res: int = 256
    uv_res: int = 128  # UV map resolution of the model input
    image_size: int = 128
    camera_distance: float = 3.0
    focal_scale: float = 1.9  # focal length in units of image size
    train_angles: tuple = (0.0, 90.0, 180.0, 270.0)
    test_angles: tuple = (45.0, 225.0)
    light_direction: tuple = (0.3, 1.0, 0.5)
    ambient: float = 0.3

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a toy sequence needs at least 2 frames")
        if not 1 <= self.segments <= 3:
            raise ValueError("segments must be 1 (torso), 2 or 3 (torso + arms)")
        for name in ("sway_amplitude", "arm_amplitude", "flap_amplitude", "period"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.uv_res < 8 or self.uv_res % 8:
            raise ValueError("uv_res must be a positive multiple of 8")
        for name in ("torso_radius", "shoulder", "train_angles", "test_angles", "light_direction"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))

    @classmethod
    def from_dict(cls, d: dict) -> "ToyBodySpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown toy body keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def omega(self) -> float:
        return 2.0 * np.pi / self.period


# ------------------------------------------------------------------ topology

@dataclass
class _Part:
    rest: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    segment: np.ndarray = field(default=None)


def _tube(n_around, n_along, rx, rz, y0, y1, side_rect, cap_rects) -> _Part:
    u0, v0, u1, v1 = side_rect
    verts, uvs, faces = [], [], []
    for j in range(n_along + 1):
        y = y0 + (y1 - y0) * j / n_along
        for i in range(n_around + 1):
            phi = -2.0 * np.pi * i / n_around
            verts.append((rx * np.cos(phi), y, rz * np.sin(phi)))
            uvs.append((u0 + (u1 - u0) * i / n_around, v0 + (v1 - v0) * j / n_along))
    row = n_around + 1
    for j in range(n_along):
        for i in range(n_around):
            a, b = j * row + i, j * row + i + 1
            c, d = a + row, b + row
            faces += [(a, b, d), (a, d, c)]
    for y, rect in ((y0, cap_rects[0]), (y1, cap_rects[1])):
        cu, cv = (rect[0] + rect[2]) / 2, (rect[1] + rect[3]) / 2
        rr = min(rect[2] - rect[0], rect[3] - rect[1]) / 2
        center = len(verts)
        verts.append((0.0, y, 0.0))
        uvs.append((cu, cv))
        for i in range(n_around):
            phi = -2.0 * np.pi * i / n_around
            verts.append((rx * np.cos(phi), y, rz * np.sin(phi)))
            uvs.append((cu + rr * np.cos(phi), cv + rr * np.sin(phi)))
        for i in range(n_around):
            faces.append((center, center + 1 + i, center + 1 + (i + 1) % n_around))
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    # convex part: orient every face away from the part's center
    mid = np.array([0.0, (y0 + y1) / 2, 0.0])
    n = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    inward = np.einsum("ij,ij->i", n, verts[faces].mean(axis=1) - mid) < 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return _Part(verts, faces, np.array(uvs))


_CAP = 0.15


def _cap_rect(k):
    u = 0.01 + k * 0.165
    return (u, 0.83, u + _CAP, 0.83 + _CAP)


@dataclass(frozen=True, eq=False)
class ToyTopology:
    rest: np.ndarray  # (V, 3) in segment-local frames
    faces: np.ndarray
    uv: np.ndarray
    segment: np.ndarray  # (V,) 0 torso, 1 left arm, 2 right arm


def build_topology(spec: ToyBodySpec) -> ToyTopology:
    rx, rz = spec.torso_radius
    parts = [_tube(spec.n_around, spec.n_along, rx, rz, 0.0, spec.torso_height,
                   (0.01, 0.01, 0.99, 0.45), (_cap_rect(0), _cap_rect(1)))]
    arm_rects = [(0.01, 0.47, 0.49, 0.81), (0.51, 0.47, 0.99, 0.81)]
    for k in range(spec.segments - 1):
        parts.append(_tube(max(spec.n_around // 2, 6), spec.n_along, spec.arm_radius, spec.arm_radius,
                           -spec.arm_length, 0.0, arm_rects[k], (_cap_rect(2 + 2 * k), _cap_rect(3 + 2 * k))))
    rest, faces, uv, seg = [], [], [], []
    offset = 0
    for s, p in enumerate(parts):
        rest.append(p.rest)
        faces.append(p.faces + offset)
        uv.append(p.uv)
        seg.append(np.full(len(p.rest), s))
        offset += len(p.rest)
    return ToyTopology(np.concatenate(rest), np.concatenate(faces), np.clip(np.concatenate(uv), 0.0, 1.0),
                       np.concatenate(seg))


# ------------------------------------------------------------------ motion

def _sway(spec, t):
    return spec.sway_amplitude * np.sin(spec.omega * t)


def _sway_rate(spec, t):
    return spec.sway_amplitude * spec.omega * np.cos(spec.omega * t)


def _arm_angle(spec, t, side):
    return side * spec.arm_amplitude * np.sin(spec.omega * t)


def flap_offset(spec: ToyBodySpec, t: float) -> float:
    """Sideways skirt displacement at the hem, opposing the lagged sway velocity."""
    peak = spec.sway_amplitude * spec.omega
    if peak == 0:
        return 0.0
    return -spec.flap_amplitude * _sway_rate(spec, t - spec.flap_lag) / peak


def _rot_x(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def body_positions(spec: ToyBodySpec, t: float, clothed: bool = False, topo: ToyTopology | None = None) -> np.ndarray:
    """Vertex positions at continuous time ``t`` (frames), float64."""
    topo = topo or build_topology(spec)
    out = topo.rest.copy()
    sx, sy = spec.shoulder
    for k, side in ((1, 1.0), (2, -1.0)):
        m = topo.segment == k
        if not m.any():
            continue
        pivot = np.array([sx if k == 1 else -sx, sy, 0.0])
        out[m] = topo.rest[m] @ _rot_x(_arm_angle(spec, t, side)).T + pivot
    out[:, 0] += _sway(spec, t)
    if clothed:
        m = (topo.segment == 0) & (topo.rest[:, 1] < spec.flap_height)
        weight = (spec.flap_height - topo.rest[m, 1]) / spec.flap_height
        out[m, 0] += flap_offset(spec, t) * weight
    return out


def analytic_velocity(spec: ToyBodySpec, t: float, topo: ToyTopology | None = None) -> np.ndarray:
    """d/dt of the unclothed body positions, in world units per frame."""
    topo = topo or build_topology(spec)
    vel = np.zeros_like(topo.rest)
    vel[:, 0] = _sway_rate(spec, t)
    w = spec.omega
    for k, side in ((1, 1.0), (2, -1.0)):
        m = topo.segment == k
        if not m.any():
            continue
        th = _arm_angle(spec, t, side)
        dth = side * spec.arm_amplitude * w * np.cos(w * t)
        c, s = np.cos(th), np.sin(th)
        d_rot = np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]]) * dth
        vel[m] += topo.rest[m] @ d_rot.T
    return vel


POSITION_GRID = 2.0 ** 20


def generate_sequence(spec: ToyBodySpec, clothed: bool = False) -> MeshSequence:
    """Frames 0..frames-1 of the body (or the clothed body).

    Positions are snapped to a 2^-20 grid. Grid values are exact in float32,
    so sequences survive the binary mesh format unchanged, and sums and
    differences of frames are exact in float64.
    """
    topo = build_topology(spec)
    pos = np.stack([body_positions(spec, t, clothed, topo) for t in range(spec.frames)])
    pos = np.round(pos * POSITION_GRID) / POSITION_GRID
    uv = topo.uv.astype(np.float32).astype(np.float64)
    return MeshSequence(pos, topo.faces, uv, spec.fps, spec.uv_res)


# ------------------------------------------------------------------ appearance

def make_texture(spec: ToyBodySpec) -> np.ndarray:
    """Checker cells with random palette colors plus fine stripes, (R, R, 3)."""
    rng = np.random.default_rng(spec.texture_seed)
    r = spec.texture_res
    palette = rng.uniform(0.35, 0.9, size=(4, 3))
    cu, cv = np.meshgrid((np.arange(r) + 0.5) / r, (np.arange(r) + 0.5) / r, indexing="ij")
    cell = (np.floor(cu * 8).astype(int) + np.floor(cv * 8).astype(int)) % 2
    band = (np.floor(cu * 2).astype(int) + 2 * np.floor(cv * 2).astype(int)) % 2
    base = palette[cell + 2 * band]
    stripes = 0.08 * np.sin(2 * np.pi * 24 * cv)[..., None]
    return np.clip(base + stripes, 0.0, 1.0)


def camera_rig(spec: ToyBodySpec) -> tuple[list[Camera], list[Camera]]:
    """(training cameras, held-out cameras) on a ring around the body."""
    size = spec.image_size
    f = spec.focal_scale * size
    target = np.array([0.0, 0.5 * spec.torso_height + 0.05, 0.0])

    def cam(angle):
        a = np.deg2rad(angle)
        eye = target + np.array([spec.camera_distance * np.sin(a), 0.4, spec.camera_distance * np.cos(a)])
        return Camera.look_at(eye, target, (0, 1, 0), f, f, size / 2, size / 2, size, size)

    return [cam(a) for a in spec.train_angles], [cam(a) for a in spec.test_angles]


@njit(cache=True)
def _raster(px, py, pz, faces, uv, shade, tex, width, height, img, depth, face_id):
    tr, tc = tex.shape[0], tex.shape[1]
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        if pz[a] <= 1e-6 or pz[b] <= 1e-6 or pz[c] <= 1e-6:
            continue
        area = (px[b] - px[a]) * (py[c] - py[a]) - (py[b] - py[a]) * (px[c] - px[a])
        if area == 0.0:
            continue
        x0 = max(int(np.floor(min(px[a], px[b], px[c]) - 0.5)), 0)
        x1 = min(int(np.ceil(max(px[a], px[b], px[c]) - 0.5)), width - 1)
        y0 = max(int(np.floor(min(py[a], py[b], py[c]) - 0.5)), 0)
        y1 = min(int(np.ceil(max(py[a], py[b], py[c]) - 0.5)), height - 1)
        for y in range(y0, y1 + 1):
            sy = y + 0.5
            for x in range(x0, x1 + 1):
                sx = x + 0.5
                w0 = ((px[b] - sx) * (py[c] - sy) - (py[b] - sy) * (px[c] - sx)) / area
                w1 = ((px[c] - sx) * (py[a] - sy) - (py[c] - sy) * (px[a] - sx)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                q0, q1, q2 = w0 / pz[a], w1 / pz[b], w2 / pz[c]
                inv = q0 + q1 + q2
                z = 1.0 / inv
                if z >= depth[y, x]:
                    continue
                depth[y, x] = z
                face_id[y, x] = f
                tu = (q0 * uv[a, 0] + q1 * uv[b, 0] + q2 * uv[c, 0]) * z
                tv = (q0 * uv[a, 1] + q1 * uv[b, 1] + q2 * uv[c, 1]) * z
                # bilinear texture lookup, texel centers, clamped
                fu = min(max(tu, 0.0), 1.0) * tr - 0.5
                fv = min(max(tv, 0.0), 1.0) * tc - 0.5
                iu = int(np.floor(fu))
                iv = int(np.floor(fv))
                au = fu - iu
                av = fv - iv
                iu0 = min(max(iu, 0), tr - 1)
                iu1 = min(max(iu + 1, 0), tr - 1)
                iv0 = min(max(iv, 0), tc - 1)
                iv1 = min(max(iv + 1, 0), tc - 1)
                for k in range(3):
                    col = ((1 - au) * ((1 - av) * tex[iu0, iv0, k] + av * tex[iu0, iv1, k])
                           + au * ((1 - av) * tex[iu1, iv0, k] + av * tex[iu1, iv1, k]))
                    img[y, x, k] = col * shade[f]


@dataclass(frozen=True, eq=False)
class ReferenceImage:
    rgb: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray
    face_id: np.ndarray


def lambert(mesh: MeshFrame, light_direction, ambient: float) -> np.ndarray:
    light = np.asarray(light_direction, dtype=np.float64)
    light = light / np.linalg.norm(light)
    return ambient + (1.0 - ambient) * np.maximum(face_normals(mesh) @ light, 0.0)


def reference_render(mesh: MeshFrame, cam: Camera, texture: np.ndarray, light_direction=(0.3, 1.0, 0.5),
                     ambient: float = 0.3) -> ReferenceImage:
    """Z-buffered, perspective-correct textured render with flat Lambert shading."""
    px, py, pz = cam.project(mesh.vertices)
    img = np.zeros((cam.height, cam.width, 3))
    depth = np.full((cam.height, cam.width), np.inf)
    fid = np.full((cam.height, cam.width), -1, dtype=np.int64)
    shade = lambert(mesh, light_direction, ambient)
    _raster(px, py, pz, mesh.faces, mesh.uv_coords, shade, np.ascontiguousarray(texture, dtype=np.float64),
            cam.width, cam.height, img, depth, fid)
    return ReferenceImage(img, fid >= 0, depth, fid)


def texture_at(texture: np.ndarray, u, v) -> np.ndarray:
    return bilinear_lookup(texture, u, v)


def render_views(seq: MeshSequence, cams: list[Camera], texture: np.ndarray, spec: ToyBodySpec) -> np.ndarray:
    """uint8 images (n_cams, frames, H, W, 3) of every camera and frame."""
    from .io import quantize

    out = []
    for cam in cams:
        frames = [reference_render(seq.frame(t), cam, texture, spec.light_direction, spec.ambient).rgb
                  for t in range(len(seq))]
        out.append(quantize(np.stack(frames)))
    return np.stack(out)


def build_dataset(spec: ToyBodySpec | None = None):
    """Unclothed body sequence plus 8-bit renders of the clothed body."""
    from .training import Dataset

    spec = spec or ToyBodySpec()
    body = generate_sequence(spec, clothed=False)
    clothed = generate_sequence(spec, clothed=True)
    texture = make_texture(spec)
    train_cams, test_cams = camera_rig(spec)
    return Dataset(body, train_cams, test_cams, render_views(clothed, train_cams, texture, spec),
                   render_views(clothed, test_cams, texture, spec), uv_res=spec.uv_res)
