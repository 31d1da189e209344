import numpy as np
import pytest

from surmo.geometry import MeshFrame, MeshSequence


def triangle_mesh() -> MeshFrame:
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    return MeshFrame(v, np.array([[0, 1, 2]]), v[:, :2].copy())


def square_mesh() -> MeshFrame:
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    return MeshFrame(v, np.array([[0, 1, 2], [0, 2, 3]]), v[:, :2].copy())


def grid_mesh(n: int = 50, seed: int = 0, amplitude: float = 0.15) -> MeshFrame:
    """Bumpy height field over the unit square; (n-1)^2 * 2 faces, UV = (x, y)."""
    rng = np.random.default_rng(seed)
    xs = np.linspace(0.0, 1.0, n)
    x, y = np.meshgrid(xs, xs, indexing="ij")
    z = amplitude * np.sin(3 * x + 1) * np.cos(4 * y) + 0.01 * rng.standard_normal(x.shape)
    v = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return MeshFrame(v, faces, v[:, :2].copy())


def uv_sphere(n_lat: int = 12, n_lon: int = 24) -> MeshFrame:
    """Closed unit sphere with outward winding and a lat-long atlas."""
    verts, uvs = [], []
    for i in range(n_lat + 1):
        th = np.pi * i / n_lat
        for j in range(n_lon + 1):
            ph = 2 * np.pi * j / n_lon
            verts.append([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
            uvs.append([j / n_lon, i / n_lat])
    faces = []
    w = n_lon + 1
    for i in range(n_lat):
        for j in range(n_lon):
            a, b, c, d = i * w + j, (i + 1) * w + j, (i + 1) * w + j + 1, i * w + j + 1
            if i > 0:
                faces.append([a, b, d])
            if i < n_lat - 1:
                faces.append([d, b, c])
    return MeshFrame(np.array(verts), np.array(faces), np.array(uvs))


def point_triangle_distance_oracle(p: np.ndarray, tri: np.ndarray) -> float:
    """Distance by plane projection, falling back to the three edge segments."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # inside test via same-side signs of sub-triangle normals
    inside = all(np.dot(np.cross(e1 - e0, q - e0), n) >= 0 for e0, e1 in ((a, b), (b, c), (c, a)))
    if inside:
        return float(abs(np.dot(p - a, n)))
    best = np.inf
    for e0, e1 in ((a, b), (b, c), (c, a)):
        d = e1 - e0
        s = np.clip(np.dot(p - e0, d) / np.dot(d, d), 0.0, 1.0)
        best = min(best, float(np.linalg.norm(p - (e0 + s * d))))
    return best


@pytest.fixture
def tri():
    return triangle_mesh()


@pytest.fixture
def square():
    return square_mesh()


@pytest.fixture(scope="session")
def toy_spec():
    from surmo.synth import ToyBodySpec

    return ToyBodySpec()


@pytest.fixture(scope="session")
def toy_body(toy_spec) -> MeshSequence:
    from surmo.synth import generate_sequence

    return generate_sequence(toy_spec)


@pytest.fixture(scope="session")
def toy_dataset(toy_spec):
    from surmo.synth import build_dataset

    return build_dataset(toy_spec)


@pytest.fixture(scope="session")
def small_dataset():
    """Tiny toy scene for fast end-to-end checks: 8 frames, 32x32 images, 32x32 UV maps."""
    from surmo.synth import ToyBodySpec, build_dataset

    return build_dataset(ToyBodySpec(frames=8, image_size=32, uv_res=32, texture_res=64))


MICRO_CONFIG = dict(plane_channels=4, encoder_channels=(4, 4, 4), decoder_channels=(4, 4, 4), res_blocks=1,
                    motion_hidden=4, mlp_width=8, color_hidden=8, feature_channels=4, sr_hidden=4)


def micro_pipeline(dataset, seed: int = 0, n_samples: int = 8, t: int = 2):
    """Float64 model, loss closure and parameter leaves for the 16x16 end-to-end gradient check.

    Zero-initialized layers get small random values so every parameter
    receives a nonzero gradient.
    """
    from surmo.tensor import precision
    from surmo.training import TrainConfig, default_model_config, forward_view
    from surmo.model import SurmoModel

    rng = np.random.default_rng(seed)
    with precision(np.float64):
        model = SurmoModel(default_model_config(dataset, **MICRO_CONFIG), seed=seed).astype(np.float64)
    for p in model.params.values():
        if not p.data.any():
            p.data = rng.normal(scale=0.1, size=p.shape)
    cfg = TrainConfig(steps=1, n_samples=n_samples)
    cam = dataset.train_cameras[0]
    gt = dataset.image("train", 0, t).astype(np.float64)

    def loss():
        with precision(np.float64):
            return forward_view(model, dataset, t, cam, cfg, rng=None, gt=gt).total

    return model, loss
