"""Learned components: motion encoder, motion decoder, radiance field and
super-resolution head, all built on :mod:`surmo.tensor`.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .motion import MOTION_CHANNELS, UvMap
from .tensor import Parameter, Tensor
from .triplane import SurfaceTriplane, VolumetricTriplane

DIRECTION_TOLERANCE = 1e-6


@dataclass
class ModelConfig:
    uv_res: int = 256
    plane_channels: int = 16
    encoder_channels: tuple = (16, 32, 64)
    decoder_channels: tuple = (32, 16, 16)
    res_blocks: int = 2
    motion_hidden: int = 32
    mlp_width: int = 64
    color_hidden: int = 32
    feature_channels: int = 16
    sr_hidden: int = 16
    sr_factor: int = 2
    h_max: float = 0.1
    velocity_scale: float = 1.0  # typical per-frame displacement; V/T inputs are divided by it
    triplane_kind: str = "surface"
    box_lo: tuple = (-1.0, -1.0, -1.0)
    box_hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.box_lo = tuple(float(np.float32(x)) for x in self.box_lo)
        self.box_hi = tuple(float(np.float32(x)) for x in self.box_hi)
        # stored as float32 in checkpoints; keep the in-memory value identical
        self.h_max = float(np.float32(self.h_max))
        self.velocity_scale = float(np.float32(self.velocity_scale))
        if not self.velocity_scale > 0:
            raise ValueError("velocity_scale must be positive")
        if len(self.encoder_channels) != 3 or len(self.decoder_channels) != 3:
            raise ValueError("encoder and decoder each have three blocks")
        if self.uv_res % 8:
            raise ValueError("uv_res must be divisible by 8")
        if self.triplane_kind not in ("surface", "volumetric"):
            raise ValueError(f"unknown triplane kind {self.triplane_kind!r}")
        if self.feature_channels < 3:
            raise ValueError("feature image needs at least 3 channels")

    @property
    def triplane_channels(self) -> int:
        return 3 * self.plane_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(eq=False)
class MotionPrediction:
    normal: Tensor  # N_t, unit length on the mask
    velocity_next: Tensor  # V_{t+1}
    mask: np.ndarray
    normal_next: np.ndarray | None = None


def _kaiming(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SurmoModel:
    """Parameter table plus the four forward functions.

    Parameters are named ``<component>.<layer>.<w|b>`` and live in
    :attr:`params` in registration order, which is also checkpoint order.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: OrderedDict[str, Parameter] = OrderedDict()
        self._rng = np.random.default_rng(seed)
        self.dtype = T.default_dtype()
        self._build()

    # ---------------------------------------------------------------- setup

    def _add(self, name, shape, fan_in, zero=False):
        data = np.zeros(shape, self.dtype) if zero else _kaiming(self._rng, fan_in, shape, self.dtype)
        self.params[name] = Parameter(data, name=name)

    def _conv(self, name, k, cin, cout, zero=False):
        self._add(f"{name}.w", (k, k, cin, cout), k * k * cin, zero)
        self.params[f"{name}.b"] = Parameter(np.zeros(cout, self.dtype), name=f"{name}.b")

    def _dense(self, name, cin, cout, zero=False):
        self._add(f"{name}.w", (cin, cout), cin, zero)
        self.params[f"{name}.b"] = Parameter(np.zeros(cout, self.dtype), name=f"{name}.b")

    def _build(self):
        c = self.config
        e0, e1, e2 = c.encoder_channels
        d0, d1, d2 = c.decoder_channels
        self._conv("encoder.down0", 3, MOTION_CHANNELS, e0)
        self._conv("encoder.down1", 3, e0, e1)
        self._conv("encoder.down2", 3, e1, e2)
        for i in range(c.res_blocks):
            self._conv(f"encoder.res{i}.a", 3, e2, e2)
            self._conv(f"encoder.res{i}.b", 3, e2, e2)
        self._conv("encoder.up0", 3, e2, d0)
        self._conv("encoder.up1", 3, d0, d1)
        self._conv("encoder.up2", 3, d1, d2)
        self._conv("encoder.out", 3, d2, c.triplane_channels, zero=True)
        self.params["encoder.out.texel_bias"] = Parameter(
            np.zeros((c.uv_res, c.uv_res, c.triplane_channels), self.dtype), name="encoder.out.texel_bias")

        self._conv("motion.hidden", 3, c.triplane_channels, c.motion_hidden)
        self._conv("motion.out", 3, c.motion_hidden, 6)

        z, w = c.triplane_channels, c.mlp_width
        self._dense("field.l0", z, w)
        self._dense("field.l1", w, w)
        self._dense("field.l2", w + z, w)
        self._dense("field.l3", w, w)
        self._dense("field.density", w, 1, zero=True)
        self._dense("field.color0", w + 3, c.color_hidden)
        self._dense("field.color1", c.color_hidden, c.feature_channels, zero=True)

        self._conv("sr.hidden", 3, c.feature_channels, c.sr_hidden)
        self._conv("sr.out", 3, c.sr_hidden, 3, zero=True)

    def p(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self, prefix: str = ""):
        return [v for k, v in self.params.items() if k.startswith(prefix)]

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def load_state_dict(self, state: dict):
        for k, v in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != v.shape:
                raise ShapeError(f"parameter {k}: checkpoint {arr.shape} vs model {v.shape}")
            v.data = arr.astype(self.dtype).copy()

    def astype(self, dtype) -> "SurmoModel":
        """Copy of the model with parameters cast to ``dtype``."""
        other = object.__new__(SurmoModel)
        other.config = self.config
        other._rng = np.random.default_rng(0)
        other.dtype = np.dtype(dtype).type
        other.params = OrderedDict(
            (k, Parameter(v.data.astype(dtype), name=k)) for k, v in self.params.items())
        for v in other.params.values():
            v.data = v.data.astype(dtype)
        return other

    # ---------------------------------------------------------------- blocks

    def _conv2d(self, x, name, stride=1):
        return T.conv2d(x, self.p(f"{name}.w"), self.p(f"{name}.b"), stride=stride)

    def _linear(self, x, name):
        return T.dense(x, self.p(f"{name}.w"), self.p(f"{name}.b"))

    # ---------------------------------------------------------------- forward

    def encode_features(self, uv_input) -> Tensor:
        """Motion map (U, V, 9) to the raw (U, V, 3 * C) triplane tensor."""
        c = self.config
        data = uv_input.data if isinstance(uv_input, UvMap) else uv_input
        x = data if isinstance(data, Tensor) else Tensor(np.asarray(data, dtype=self.dtype))
        if x.shape != (c.uv_res, c.uv_res, MOTION_CHANNELS):
            raise ShapeError(f"encode_motion: expected {(c.uv_res, c.uv_res, MOTION_CHANNELS)}, got {x.shape}")
        gain = np.ones(MOTION_CHANNELS, dtype=self.dtype)
        gain[3:] = 1.0 / c.velocity_scale
        h = x * Tensor(gain)
        for i in range(3):
            h = T.leaky_relu(self._conv2d(h, f"encoder.down{i}", stride=2))
        for i in range(c.res_blocks):
            r = T.leaky_relu(self._conv2d(h, f"encoder.res{i}.a"))
            h = h + self._conv2d(r, f"encoder.res{i}.b")
        for i in range(3):
            h = T.leaky_relu(self._conv2d(T.bilinear_resize(h, 2), f"encoder.up{i}"))
        return self._conv2d(h, "encoder.out") + self.p("encoder.out.texel_bias")

    def encode_motion(self, uv_input):
        feats = self.encode_features(uv_input)
        c = self.config
        if c.triplane_kind == "volumetric":
            return VolumetricTriplane(feats, np.array(c.box_lo), np.array(c.box_hi))
        return SurfaceTriplane(feats, c.h_max)

    def decode_motion(self, triplane, mask: np.ndarray, pose_uv: UvMap | None = None) -> MotionPrediction:
        """Predict N_t and V_{t+1} maps from the triplane tensor.

        With ``pose_uv`` (channels 0..2 = P_t) the next-step normal is also
        derived from P_t + V_{t+1}.
        """
        x = triplane.features
        h = T.leaky_relu(self._conv2d(x, "motion.hidden"))
        out = self._conv2d(h, "motion.out")
        m = Tensor(mask[..., None].astype(self.dtype))
        normal = T.normalize(out[:, :, 0:3]) * m
        vel = T.scale(out[:, :, 3:6] * m, self.config.velocity_scale)
        nxt = None
        if pose_uv is not None:
            from .motion import next_normal_from_velocity
            nxt = next_normal_from_velocity(pose_uv, UvMap(vel.data.astype(np.float64), mask))
        return MotionPrediction(normal, vel, mask, nxt)

    def radiance_field(self, z: Tensor, d) -> tuple[Tensor, Tensor]:
        """(color features, density) for features z (N, 3C) and unit directions d (N, 3)."""
        d = np.asarray(d.data if isinstance(d, Tensor) else d)
        if d.ndim == 1:
            d = d[None]
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > DIRECTION_TOLERANCE):
            raise ValueError("view directions must be unit length")
        if z.ndim != 2 or z.shape[1] != self.config.triplane_channels:
            raise ShapeError(f"radiance_field: features {z.shape}")
        h = T.leaky_relu(self._linear(z, "field.l0"))
        h = T.leaky_relu(self._linear(h, "field.l1"))
        h = T.leaky_relu(self._linear(T.concat([h, z], axis=1), "field.l2"))
        h = T.leaky_relu(self._linear(h, "field.l3"))
        sigma = T.softplus(self._linear(h, "field.density")).reshape(-1)
        dirs = Tensor(d.astype(self.dtype))
        ch = T.leaky_relu(self._linear(T.concat([h, dirs], axis=1), "field.color0"))
        color = self._linear(ch, "field.color1")
        return color, sigma

    def super_resolve(self, feat: Tensor) -> Tensor:
        """Feature image (H, W, C) to RGB (sH, sW, 3) in [0, 1]."""
        if feat.ndim != 3 or feat.shape[2] != self.config.feature_channels:
            raise ShapeError(f"super_resolve: feature image {feat.shape}")
        up = T.bilinear_resize(feat, self.config.sr_factor)
        h = T.leaky_relu(self._conv2d(up, "sr.hidden"))
        rgb = self._conv2d(h, "sr.out") + up[:, :, 0:3]
        return T.clamp(rgb, 0.0, 1.0)
