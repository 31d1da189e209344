"""Triangle meshes, a face BVH for nearest-surface queries, and the
surface-local (u, v, h) coordinate transform.

All geometry is carried in float64. Query kernels are compiled with numba
and are safe to call concurrently: the BVH and mesh are never mutated after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DegenerateFaceError, GeometryError, TopologyMismatchError

LEAF_SIZE = 4
UV_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class MeshFrame:
    """One posed triangle mesh with a per-vertex UV atlas."""

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        uvs = np.ascontiguousarray(self.uv_coords, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise GeometryError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise GeometryError(f"faces must be (F, 3), got {faces.shape}")
        if uvs.shape != (len(verts), 2):
            raise GeometryError(f"uv_coords must be ({len(verts)}, 2), got {uvs.shape}")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise GeometryError("face index out of range")
        if uvs.size and (uvs.min() < 0.0 or uvs.max() > 1.0):
            raise GeometryError("uv_coords must lie in [0, 1]^2")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "uv_coords", uvs)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_vertices(self, vertices: np.ndarray, frame_index: int | None = None) -> "MeshFrame":
        return MeshFrame(
            vertices,
            self.faces,
            self.uv_coords,
            self.frame_index if frame_index is None else frame_index,
        )


@dataclass(eq=False)
class MeshSequence:
    """Time-indexed vertex positions over a fixed topology and UV atlas."""

    positions: np.ndarray  # (T, V, 3)
    faces: np.ndarray
    uv_coords: np.ndarray
    fps: float = 30.0
    uv_resolution: int = 256

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.uv_coords = np.ascontiguousarray(self.uv_coords, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise TopologyMismatchError(
                f"positions must be (T, V, 3), got {self.positions.shape}"
            )
        if self.positions.shape[1] != len(self.uv_coords):
            raise TopologyMismatchError("vertex count differs between frames and UV atlas")

    @classmethod
    def from_frames(cls, frames: list[MeshFrame], fps: float = 30.0) -> "MeshSequence":
        first = frames[0]
        for fr in frames[1:]:
            if fr.vertices.shape != first.vertices.shape or not np.array_equal(fr.faces, first.faces):
                raise TopologyMismatchError(f"frame {fr.frame_index} changes topology")
        return cls(np.stack([f.vertices for f in frames]), first.faces, first.uv_coords, fps)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[1]

    def frame(self, t: int) -> MeshFrame:
        if not 0 <= t < len(self):
            raise IndexError(f"frame {t} outside sequence of length {len(self)}")
        return MeshFrame(self.positions[t], self.faces, self.uv_coords, t)


@dataclass(frozen=True)
class SurfaceLocalCoord:
    """Surface-local coordinate of a query point.

    ``h`` is the signed distance to the nearest surface point, positive on the
    side the nearest face's normal points to. Fields are scalars for a single
    query and 1-D arrays for batched queries.
    """

    face_index: int | np.ndarray
    u: float | np.ndarray
    v: float | np.ndarray
    h: float | np.ndarray


@dataclass(frozen=True, eq=False)
class FaceBvh:
    """Flattened AABB hierarchy over mesh faces.

    Node ``i`` is a leaf when ``count[i] > 0``; its faces are
    ``leaf_faces[start[i]:start[i] + count[i]]``. Inner nodes reference
    children via ``left``/``right``.
    """

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    leaf_faces: np.ndarray
    n_faces: int = field(default=0)

    @property
    def n_nodes(self) -> int:
        return len(self.lo)


def face_normals(mesh: MeshFrame) -> np.ndarray:
    """Unit normals by the right-hand rule on (v1 - v0, v2 - v0)."""
    return _face_normals(mesh.vertices, mesh.faces)


def _face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    n = np.cross(e1, e2)
    length = np.linalg.norm(n, axis=1)
    scale = np.maximum(np.einsum("ij,ij->i", e1, e1), np.einsum("ij,ij->i", e2, e2))
    bad = np.nonzero(length <= 1e-12 * scale)[0]
    if len(bad):
        raise DegenerateFaceError(int(bad[0]))
    return n / length[:, None]


def build_bvh(mesh: MeshFrame) -> FaceBvh:
    """Median-split BVH over face centroids (longest centroid axis)."""
    if mesh.n_faces == 0:
        raise GeometryError("cannot build a BVH over an empty mesh")
    tri = mesh.vertices[mesh.faces]
    f_lo = tri.min(axis=1)
    f_hi = tri.max(axis=1)
    centroids = tri.mean(axis=1)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(mesh.n_faces)
    leaf_faces = []

    def new_node(idx):
        lo.append(f_lo[idx].min(axis=0))
        hi.append(f_hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(lo) - 1

    stack = [(new_node(order), order)]
    while stack:
        node, idx = stack.pop()
        if len(idx) <= LEAF_SIZE:
            start[node] = len(leaf_faces)
            count[node] = len(idx)
            leaf_faces.extend(sorted(idx.tolist()))
            continue
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the split deterministic for repeated centroids
        srt = idx[np.argsort(c[:, axis], kind="stable")]
        mid = len(srt) // 2
        a, b = srt[:mid], srt[mid:]
        na, nb = new_node(a), new_node(b)
        left[node], right[node] = na, nb
        stack.append((nb, b))
        stack.append((na, a))

    return FaceBvh(
        lo=np.asarray(lo, dtype=np.float64),
        hi=np.asarray(hi, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        leaf_faces=np.asarray(leaf_faces, dtype=np.int64),
        n_faces=mesh.n_faces,
    )


@njit(cache=True)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point on triangle ABC as barycentric weights (Voronoi regions)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return 1.0 - t, t, 0.0
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return 1.0 - t, 0.0, t
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - t, t
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@njit(cache=True)
def _face_query(p, verts, faces, f):
    i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
    b0, b1, b2 = _closest_on_triangle(
        p[0], p[1], p[2],
        verts[i0, 0], verts[i0, 1], verts[i0, 2],
        verts[i1, 0], verts[i1, 1], verts[i1, 2],
        verts[i2, 0], verts[i2, 1], verts[i2, 2],
    )
    qx = b0 * verts[i0, 0] + b1 * verts[i1, 0] + b2 * verts[i2, 0]
    qy = b0 * verts[i0, 1] + b1 * verts[i1, 1] + b2 * verts[i2, 1]
    qz = b0 * verts[i0, 2] + b1 * verts[i1, 2] + b2 * verts[i2, 2]
    dx, dy, dz = p[0] - qx, p[1] - qy, p[2] - qz
    return dx * dx + dy * dy + dz * dz, b0, b1, b2


@njit(cache=True)
def _box_dist2(p, lo, hi):
    d2 = 0.0
    for k in range(3):
        if p[k] < lo[k]:
            d = lo[k] - p[k]
            d2 += d * d
        elif p[k] > hi[k]:
            d = p[k] - hi[k]
            d2 += d * d
    return d2


@njit(cache=True)
def _nearest_bvh(points, verts, faces, lo, hi, left, right, start, count, leaf_faces,
                 max_dist2, out_face, out_bary, out_d2):
    stack = np.empty(128, dtype=np.int64)
    for i in range(points.shape[0]):
        p = points[i]
        best = max_dist2
        best_f = -1
        bb0 = bb1 = bb2 = 0.0
        sp = 0
        if _box_dist2(p, lo[0], hi[0]) <= best:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_dist2(p, lo[node], hi[node]) > best:
                continue
            if count[node] > 0:
                for k in range(start[node], start[node] + count[node]):
                    f = leaf_faces[k]
                    d2, b0, b1, b2 = _face_query(p, verts, faces, f)
                    if d2 < best or (d2 == best and (best_f < 0 or f < best_f)):
                        best = d2
                        best_f = f
                        bb0, bb1, bb2 = b0, b1, b2
            else:
                a = left[node]
                b = right[node]
                da = _box_dist2(p, lo[a], hi[a])
                db = _box_dist2(p, lo[b], hi[b])
                # push the farther child first so the nearer one is visited next
                if da <= db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        out_face[i] = best_f
        out_bary[i, 0] = bb0
        out_bary[i, 1] = bb1
        out_bary[i, 2] = bb2
        out_d2[i] = best if best_f >= 0 else np.inf


@njit(cache=True)
def _nearest_brute(points, verts, faces, out_face, out_bary, out_d2):
    for i in range(points.shape[0]):
        best = np.inf
        best_f = -1
        for f in range(faces.shape[0]):
            d2, b0, b1, b2 = _face_query(points[i], verts, faces, f)
            if d2 < best:
                best = d2
                best_f = f
                out_bary[i, 0] = b0
                out_bary[i, 1] = b1
                out_bary[i, 2] = b2
        out_face[i] = best_f
        out_d2[i] = best


@dataclass(frozen=True)
class NearestResult:
    face_index: np.ndarray
    nearest_point: np.ndarray
    distance: np.ndarray
    barycentric: np.ndarray


def _as_points(p) -> tuple[np.ndarray, bool]:
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    return np.ascontiguousarray(pts.reshape(-1, 3)), single


def nearest_faces(bvh: FaceBvh, mesh: MeshFrame, points, max_distance: float = np.inf) -> NearestResult:
    """Batched nearest-face query.

    Points farther than ``max_distance`` from every face get face index -1
    and infinite distance; the search prunes with that radius, so this is the
    cheap path for shell-membership tests.
    """
    pts, _ = _as_points(points)
    n = len(pts)
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3), dtype=np.float64)
    d2 = np.empty(n, dtype=np.float64)
    limit = np.inf if not np.isfinite(max_distance) else float(max_distance) ** 2
    _nearest_bvh(pts, mesh.vertices, mesh.faces, bvh.lo, bvh.hi, bvh.left, bvh.right,
                 bvh.start, bvh.count, bvh.leaf_faces, limit, face, bary, d2)
    hit = face >= 0
    q = np.full((n, 3), np.nan)
    q[hit] = np.einsum("ni,nij->nj", bary[hit], mesh.vertices[mesh.faces[face[hit]]])
    return NearestResult(face, q, np.sqrt(d2), bary)


def nearest_faces_brute(mesh: MeshFrame, points) -> NearestResult:
    """Exhaustive scan; the reference the BVH must agree with."""
    pts, _ = _as_points(points)
    n = len(pts)
    face = np.empty(n, dtype=np.int64)
    bary = np.zeros((n, 3), dtype=np.float64)
    d2 = np.empty(n, dtype=np.float64)
    _nearest_brute(pts, mesh.vertices, mesh.faces, face, bary, d2)
    q = np.einsum("ni,nij->nj", bary, mesh.vertices[mesh.faces[face]])
    return NearestResult(face, q, np.sqrt(d2), bary)


def nearest_face(bvh: FaceBvh, mesh: MeshFrame, p) -> tuple[int, np.ndarray, float]:
    """Nearest face to a single point: (face_index, nearest_point, distance)."""
    res = nearest_faces(bvh, mesh, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return int(res.face_index[0]), res.nearest_point[0], float(res.distance[0])


def surface_local_coords(bvh: FaceBvh, mesh: MeshFrame, p, normals: np.ndarray | None = None,
                         max_distance: float = np.inf) -> SurfaceLocalCoord:
    """Map world points to (face, u, v, h).

    Accepts a single point or an (N, 3) array. With a finite ``max_distance``
    points outside that radius come back with face -1 and NaN coordinates.
    """
    pts, single = _as_points(p)
    res = nearest_faces(bvh, mesh, pts, max_distance)
    if normals is None:
        normals = face_normals(mesh)
    hit = res.face_index >= 0
    f = res.face_index[hit]
    uv = np.full((len(pts), 2), np.nan)
    uv[hit] = np.einsum("ni,nij->nj", res.barycentric[hit], mesh.uv_coords[mesh.faces[f]])
    h = np.full(len(pts), np.nan)
    side = np.einsum("ij,ij->i", pts[hit] - res.nearest_point[hit], normals[f])
    h[hit] = np.where(side < 0.0, -res.distance[hit], res.distance[hit])
    if single:
        return SurfaceLocalCoord(int(res.face_index[0]), float(uv[0, 0]), float(uv[0, 1]), float(h[0]))
    return SurfaceLocalCoord(res.face_index, uv[:, 0], uv[:, 1], h)


def uv_barycentric(mesh: MeshFrame, face_index, u, v) -> np.ndarray:
    """Barycentric weights of (u, v) within each face's UV triangle."""
    f = np.atleast_1d(np.asarray(face_index, dtype=np.int64))
    uvt = mesh.uv_coords[mesh.faces[f]]
    a, b, c = uvt[:, 0], uvt[:, 1], uvt[:, 2]
    e1 = b - a
    e2 = c - a
    r = np.stack([np.atleast_1d(u), np.atleast_1d(v)], axis=1) - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det == 0.0):
        raise GeometryError("degenerate UV triangle")
    w1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
    w2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
    return np.stack([1.0 - w1 - w2, w1, w2], axis=1)


def local_to_world(mesh: MeshFrame, c: SurfaceLocalCoord, normals: np.ndarray | None = None) -> np.ndarray:
    """Inverse of :func:`surface_local_coords` for points on the chart."""
    single = np.ndim(c.face_index) == 0
    f = np.atleast_1d(np.asarray(c.face_index, dtype=np.int64))
    if np.any(f < 0) or np.any(f >= mesh.n_faces):
        raise GeometryError("face index out of range")
    bary = uv_barycentric(mesh, f, c.u, c.v)
    if np.any(bary < -UV_TOLERANCE):
        raise GeometryError("(u, v) lies outside the face's UV triangle")
    if normals is None:
        normals = face_normals(mesh)
    base = np.einsum("ni,nij->nj", bary, mesh.vertices[mesh.faces[f]])
    out = base + np.atleast_1d(c.h)[:, None] * normals[f]
    return out[0] if single else out


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test; returns (t_near, t_far, hit) with t_near clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    tn = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    tf = np.maximum(t0, t1).min(axis=1)
    return tn, tf, tf > tn
