"""File formats: mesh sequences, cameras, images, float maps and checkpoints.

All binary payloads are little-endian. Readers return float64 arrays whose
values are exactly the stored float32 values, so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, MagicError, TruncatedError, VersionError
from .geometry import MeshSequence
from .model import ModelConfig, SurmoModel
from .renderer import Camera

MESH_MAGIC = "SMSQ1"
FMAP_MAGIC = "SFMAP1"
CKPT_MAGIC = b"SURM"
CKPT_VERSION = 1
_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


def _parse_header(data: bytes, magic: str, keys: tuple[str, ...]) -> tuple[dict, int]:
    """Parse ``magic\\nkey value\\n...end\\n``; returns (fields, payload offset)."""
    end = data.find(b"\nend\n")
    if not data.startswith(magic.encode() + b"\n"):
        first = data.split(b"\n", 1)[0][:16]
        raise MagicError(f"expected magic {magic!r}, found {first!r}")
    if end < 0:
        raise TruncatedError("header has no 'end' line")
    fields = {}
    for line in data[len(magic) + 1:end].decode("ascii").splitlines():
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"malformed header line {line!r}")
        fields[parts[0]] = parts[1]
    missing = [k for k in keys if k not in fields]
    if missing:
        raise FormatError(f"header is missing {missing}")
    return fields, end + len(b"\nend\n")


def _take(data: bytes, offset: int, dtype, count: int, what: str):
    n = np.dtype(dtype).itemsize * count
    if offset + n > len(data):
        raise TruncatedError(f"{what}: need {n} bytes at offset {offset}, file has {len(data)}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset), offset + n


# ------------------------------------------------------------------ mesh sequence

def write_mesh_sequence(path, seq: MeshSequence) -> None:
    t, v, _ = seq.positions.shape
    header = (f"{MESH_MAGIC}\nvertices {v}\nfaces {len(seq.faces)}\nframes {t}\n"
              f"fps {float(seq.fps)!r}\nuv_resolution {int(seq.uv_resolution)}\nend\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(seq.faces, dtype=_U32).tobytes())
        fh.write(np.asarray(seq.uv_coords, dtype=_F32).tobytes())
        fh.write(np.asarray(seq.positions, dtype=_F32).tobytes())


def read_mesh_sequence(path) -> MeshSequence:
    data = _read_bytes(path)
    h, off = _parse_header(data, MESH_MAGIC, ("vertices", "faces", "frames", "fps", "uv_resolution"))
    nv, nf, nt = int(h["vertices"]), int(h["faces"]), int(h["frames"])
    faces, off = _take(data, off, _U32, 3 * nf, "faces")
    uv, off = _take(data, off, _F32, 2 * nv, "uv_coords")
    pos, off = _take(data, off, _F32, 3 * nv * nt, "positions")
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after mesh payload")
    return MeshSequence(pos.reshape(nt, nv, 3).astype(np.float64), faces.reshape(nf, 3).astype(np.int64),
                        uv.reshape(nv, 2).astype(np.float64), float(h["fps"]), int(h["uv_resolution"]))


# ------------------------------------------------------------------ camera

_CAM_KEYS = ("fx", "fy", "cx", "cy", "extrinsic", "width", "height")


def write_camera(path, cam: Camera) -> None:
    ext = " ".join(repr(float(x)) for x in cam.extrinsic.ravel())
    text = (f"fx={float(cam.fx)!r}\nfy={float(cam.fy)!r}\ncx={float(cam.cx)!r}\ncy={float(cam.cy)!r}\n"
            f"extrinsic={ext}\nwidth={int(cam.width)}\nheight={int(cam.height)}\n")
    Path(path).write_text(text)


def read_camera(path) -> Camera:
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"camera line without '=': {line!r}")
        k, v = line.split("=", 1)
        fields[k.strip()] = v.strip()
    missing = [k for k in _CAM_KEYS if k not in fields]
    if missing:
        raise FormatError(f"camera file is missing {missing}")
    try:
        ext = np.array([float(x) for x in fields["extrinsic"].split()])
        if ext.size != 12:
            raise FormatError(f"extrinsic needs 12 values, got {ext.size}")
        return Camera(float(fields["fx"]), float(fields["fy"]), float(fields["cx"]), float(fields["cy"]),
                      ext.reshape(3, 4), int(fields["width"]), int(fields["height"]))
    except ValueError as exc:
        raise FormatError(f"bad camera value: {exc}") from exc


# ------------------------------------------------------------------ images

def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image to uint8 (round half to even after clipping)."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) image as binary PPM; floats are quantized to 8 bits."""
    arr = img if img.dtype == np.uint8 else quantize(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"PPM needs (H, W, 3), got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM with maxval 255 as uint8 (H, W, 3)."""
    data = _read_bytes(path)
    if not data.startswith(b"P6"):
        raise MagicError(f"not a binary PPM: {data[:2]!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos) + 1 or len(data)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedError("PPM header ended early")
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pix, end = _take(data, pos, np.uint8, w * h * 3, "PPM pixels")
    return pix.reshape(h, w, 3).copy()


# ------------------------------------------------------------------ float maps

def write_float_map(path, data: np.ndarray, mask: np.ndarray | None = None) -> None:
    """(H, W, C) float32 map stored channel-planar; optional uint8 mask plane."""
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    header = f"{FMAP_MAGIC}\nheight {h}\nwidth {w}\nchannels {c}\nmask {int(mask is not None)}\nend\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(np.moveaxis(arr.astype(_F32), 2, 0)).tobytes())
        if mask is not None:
            if mask.shape != (h, w):
                raise FormatError(f"mask shape {mask.shape} does not match map {(h, w)}")
            fh.write(np.asarray(mask, dtype=np.uint8).tobytes())


def read_float_map(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (float32 (H, W, C), bool mask or None)."""
    raw = _read_bytes(path)
    hd, off = _parse_header(raw, FMAP_MAGIC, ("height", "width", "channels", "mask"))
    h, w, c = int(hd["height"]), int(hd["width"]), int(hd["channels"])
    planes, off = _take(raw, off, _F32, h * w * c, "float planes")
    mask = None
    if hd["mask"] == "1":
        m, off = _take(raw, off, np.uint8, h * w, "mask plane")
        mask = m.reshape(h, w).astype(bool)
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after float map")
    return np.moveaxis(planes.reshape(c, h, w), 0, 2).astype(np.float32), mask


# ------------------------------------------------------------------ checkpoints

def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def write_tensors(path, tensors: dict) -> None:
    """Named float32 tensors with a trailing 64-bit checksum."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=_F32)
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<Q", checksum(body)))


def read_tensors(path) -> dict:
    data = _read_bytes(path)
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise MagicError(f"expected checkpoint magic {CKPT_MAGIC!r}, found {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedError("checkpoint shorter than its header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    if len(data) < 20:
        raise ChecksumError("checkpoint has no checksum")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if checksum(body) != stored:
        raise ChecksumError(f"checksum mismatch (stored {stored:016x}, computed {checksum(body):016x})")
    (count,) = struct.unpack_from("<I", body, 8)
    off = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            name = body[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", body, off)
            dims = struct.unpack_from(f"<{rank}I", body, off + 4)
            off += 4 + 4 * rank
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            arr, off = _take(body, off, _F32, int(np.prod(dims, dtype=np.int64)), name)
            out[name] = arr.reshape(dims).copy()
    except struct.error as exc:
        raise TruncatedError(f"checkpoint table ends early: {exc}") from exc
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes in checkpoint table")
    return out


_KINDS = ("surface", "volumetric")


def config_tensors(cfg: ModelConfig) -> dict:
    out = {}
    for k, v in cfg.to_dict().items():
        if k == "triplane_kind":
            v = _KINDS.index(v)
        out[f"config.{k}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    return out


def config_from_tensors(t: dict) -> ModelConfig:
    defaults = ModelConfig().to_dict()
    d = {}
    for k, v in t.items():
        if not k.startswith("config."):
            continue
        name = k[len("config."):]
        if name not in defaults:
            raise FormatError(f"unknown config entry {name!r} in checkpoint")
        vals = [float(x) for x in v.ravel()]
        ref = defaults[name]
        if name == "triplane_kind":
            d[name] = _KINDS[int(vals[0])]
        elif isinstance(ref, tuple):
            d[name] = tuple(type(ref[0])(x) for x in vals)
        else:
            d[name] = type(ref)(vals[0])
    return ModelConfig.from_dict(d)


def save_checkpoint(path, model: SurmoModel) -> None:
    tensors = config_tensors(model.config)
    tensors.update(model.state_dict())
    write_tensors(path, tensors)


def load_checkpoint(path) -> SurmoModel:
    t = read_tensors(path)
    cfg = config_from_tensors(t)
    model = SurmoModel(cfg, seed=0)
    missing = [k for k in model.params if k not in t]
    if missing:
        raise FormatError(f"checkpoint lacks parameters {missing[:3]}")
    model.load_state_dict(t)
    return model


# ------------------------------------------------------------------ dataset directories

BODY_FILE = "body.smsq"
CLOTHED_FILE = "clothed.smsq"
MOTION_DIR = "motion"


def camera_path(root, split: str, index: int) -> Path:
    return Path(root) / "cameras" / f"{split}_{index}.cam"


def image_path(root, split: str, cam: int, frame: int) -> Path:
    return Path(root) / "images" / f"{split}_{cam}" / f"frame_{frame:04d}.ppm"


def motion_path(root, frame: int) -> Path:
    return Path(root) / MOTION_DIR / f"frame_{frame:04d}.fmap"


def write_dataset(root, dataset, clothed: MeshSequence | None = None, texture: np.ndarray | None = None) -> None:
    """Write a dataset directory (sequence, cameras, 8-bit images)."""
    root = Path(root)
    for sub in ("cameras", "images"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_mesh_sequence(root / BODY_FILE, dataset.sequence)
    if clothed is not None:
        write_mesh_sequence(root / CLOTHED_FILE, clothed)
    if texture is not None:
        write_ppm(root / "texture.ppm", texture)
    for split, cams, imgs in (("train", dataset.train_cameras, dataset.train_images),
                              ("test", dataset.test_cameras, dataset.test_images)):
        for c, cam in enumerate(cams):
            write_camera(camera_path(root, split, c), cam)
            image_path(root, split, c, 0).parent.mkdir(parents=True, exist_ok=True)
            for t in range(imgs.shape[1]):
                write_ppm(image_path(root, split, c, t), imgs[c, t])


def _count(pattern_dir: Path, prefix: str) -> int:
    n = 0
    while (pattern_dir / f"{prefix}_{n}.cam").exists():
        n += 1
    return n


def read_dataset(root, uv_res: int | None = None):
    """Load a dataset directory written by :func:`write_dataset`.

    Motion maps found under ``motion/`` (from ``extract-motion``) are used
    when their resolution matches; missing frames are computed on demand.
    """
    from .training import Dataset

    root = Path(root)
    if not (root / BODY_FILE).exists():
        raise FileNotFoundError(f"{root / BODY_FILE} not found")
    seq = read_mesh_sequence(root / BODY_FILE)
    cams = {}
    imgs = {}
    for split in ("train", "test"):
        n = _count(root / "cameras", split)
        cams[split] = [read_camera(camera_path(root, split, c)) for c in range(n)]
        imgs[split] = np.stack([np.stack([read_ppm(image_path(root, split, c, t)) for t in range(len(seq))])
                                for c in range(n)]) if n else np.zeros((0, len(seq), 1, 1, 3), np.uint8)
    res = uv_res or seq.uv_resolution
    ds = Dataset(seq, cams["train"], cams["test"], imgs["train"], imgs["test"], uv_res=res)
    for t in range(len(seq)):
        p = motion_path(root, t)
        if p.exists():
            data, _ = read_float_map(p)
            if data.shape[:2] == (res, res):
                ds.motion_maps[t] = data
    return ds
