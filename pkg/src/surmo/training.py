"""Losses, image metrics, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .errors import ShapeError, TrainingDiverged
from .geometry import FaceBvh, MeshFrame, MeshSequence, build_bvh
from .model import ModelConfig, SurmoModel
from .motion import TrajectoryConfig, extract_motion, motion_to_uv, normal_uv, rasterize_uv, uv_raster
from .renderer import Camera, RenderConfig, generate_rays, render_feature_image, sample_points_filtered
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "loss_total", "loss_pix", "loss_vel", "loss_norm", "loss_vol", "psnr"]


@dataclass(frozen=True)
class LossWeights:
    pix: float = 0.5
    vgg: float = 10.0  # inactive, no pretrained network
    adv: float = 1.0  # inactive
    face: float = 5.0  # inactive
    velocity: float = 1.0
    normal: float = 1.0
    vol: float = 15.0

    def __post_init__(self):
        if min(self.pix, self.vgg, self.adv, self.face, self.velocity, self.normal, self.vol) < 0:
            raise ValueError("loss weights must be non-negative")


# ------------------------------------------------------------------ losses

def loss_pixel(pred: Tensor, gt) -> Tensor:
    return T.l1(pred, gt)


def loss_velocity(pred: Tensor, gt, mask: np.ndarray, gt_mask: np.ndarray | None = None) -> Tensor:
    if gt_mask is not None and not np.array_equal(mask, gt_mask):
        raise ShapeError("velocity maps have different coverage masks")
    return T.masked_mse(pred, gt, mask)


def loss_normal(pred: Tensor, gt, mask: np.ndarray, gt_mask: np.ndarray | None = None) -> Tensor:
    if gt_mask is not None and not np.array_equal(mask, gt_mask):
        raise ShapeError("normal maps have different coverage masks")
    return T.masked_mse(pred, gt, mask)


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ShapeError(f"image {img.shape} not divisible by {factor}")
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3)).reshape(
        (h // factor, w // factor) + img.shape[2:])


def loss_volume(feature_image: Tensor, gt_low) -> Tensor:
    """MSE between the first three feature channels and the downsampled target."""
    return T.mse(feature_image[:, :, 0:3], gt_low)


def total_loss(weights: LossWeights, pix=None, velocity=None, normal=None, vol=None) -> Tensor:
    terms = [(weights.pix, pix), (weights.velocity, velocity), (weights.normal, normal), (weights.vol, vol)]
    out = Tensor(np.zeros((), dtype=T.default_dtype()))
    for w, term in terms:
        if term is not None:
            out = out + T.scale(term, w)
    return out


# ------------------------------------------------------------------ metrics

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ShapeError(f"psnr: shapes {pred.shape} and {gt.shape} differ")
    err = np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2)
    if err < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def ssim(pred: np.ndarray, gt: np.ndarray, sigma: float = 1.5, win: int = 11) -> float:
    """Mean SSIM with a Gaussian window, averaged over channels (data range 1)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"ssim: shapes {pred.shape} and {gt.shape} differ")
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    r = win // 2
    trunc = r / sigma
    vals = []
    for k in range(x.shape[2]):
        a, b = x[..., k], y[..., k]

        def filt(img):
            return gaussian_filter(img, sigma, truncate=trunc, mode="reflect")[r:-r, r:-r]

        mx, my = filt(a), filt(b)
        sxx = filt(a * a) - mx * mx
        syy = filt(b * b) - my * my
        sxy = filt(a * b) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# ------------------------------------------------------------------ data

@dataclass(eq=False)
class Dataset:
    """Body sequence, camera rig and ground-truth images.

    ``train_images[c, t]`` is the RGB image of training camera ``c`` at frame
    ``t`` as uint8; ``test_images`` likewise for the held-out cameras.
    """

    sequence: MeshSequence
    train_cameras: list[Camera]
    test_cameras: list[Camera]
    train_images: np.ndarray
    test_images: np.ndarray
    uv_res: int = 256
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    motion_maps: dict = field(default_factory=dict)

    def __post_init__(self):
        self._bvh = {}
        self._targets = {}

    @property
    def n_frames(self) -> int:
        return len(self.sequence)

    def image(self, split: str, cam: int, t: int) -> np.ndarray:
        imgs = self.train_images if split == "train" else self.test_images
        return imgs[cam, t].astype(np.float32) / 255.0

    def mesh(self, t: int) -> MeshFrame:
        return self.sequence.frame(t)

    def bvh(self, t: int) -> FaceBvh:
        if t not in self._bvh:
            self._bvh[t] = build_bvh(self.mesh(t))
        return self._bvh[t]

    def motion_map(self, t: int) -> np.ndarray:
        if t not in self.motion_maps:
            state = extract_motion(self.sequence, t, self.trajectory)
            self.motion_maps[t] = motion_to_uv(state, self.mesh(t), self.uv_res).data.astype(np.float32)
        return self.motion_maps[t]

    @property
    def uv_mask(self) -> np.ndarray:
        return uv_raster(self.mesh(0), self.uv_res).mask

    def motion_targets(self, t: int, velocity_target: str = "next"):
        """(normal map N_t, velocity map V_{t+1} or V_t)."""
        key = (t, velocity_target)
        if key not in self._targets:
            mesh = self.mesh(t)
            n = normal_uv(mesh, self.uv_res).data.astype(np.float32)
            tv = t + 1 if velocity_target == "next" else t
            vel = self.sequence.positions[tv] - self.sequence.positions[tv - 1] if tv > 0 else \
                np.zeros_like(self.sequence.positions[0])
            v = rasterize_uv(mesh, vel, self.uv_res).data.astype(np.float32)
            self._targets[key] = (n, v)
        return self._targets[key]

    def velocity_rms(self) -> float:
        """Root-mean-square per-frame vertex displacement (1.0 for a static sequence)."""
        p = self.sequence.positions
        if len(p) < 2:
            return 1.0
        rms = float(np.sqrt(np.mean(np.sum(np.diff(p, axis=0) ** 2, axis=2))))
        return rms if rms > 0 else 1.0

    def union_bounds(self):
        p = self.sequence.positions
        return p.min(axis=(0, 1)), p.max(axis=(0, 1))


def default_model_config(dataset: Dataset, triplane_kind: str = "surface", **overrides) -> ModelConfig:
    # shell half-width from the rest-pose (first frame) box; the volumetric box spans all frames
    r_lo, r_hi = dataset.mesh(0).bounds()
    h_max = 0.1 * float(np.linalg.norm(r_hi - r_lo))
    lo, hi = dataset.union_bounds()
    cfg = dict(uv_res=dataset.uv_res, h_max=h_max, triplane_kind=triplane_kind,
               velocity_scale=dataset.velocity_rms(),
               box_lo=tuple(lo - h_max), box_hi=tuple(hi + h_max))
    cfg.update(overrides)
    return ModelConfig(**cfg)


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    dynamics_cond: bool = True
    predict_motion: bool = True
    triplane_kind: str = "surface"
    velocity_target: str = "next"
    n_samples: int = 64
    log_every: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.velocity_target not in ("next", "current"):
            raise ValueError("velocity_target is 'next' or 'current'")


@dataclass
class StepResult:
    total: Tensor
    terms: dict
    rgb: Tensor
    features: Tensor
    opacity: Tensor
    n_field_evals: int


def model_input(dataset: Dataset, t: int, dynamics_cond: bool, dtype=np.float32) -> np.ndarray:
    x = dataset.motion_map(t).astype(dtype)
    if not dynamics_cond:
        x = x.copy()
        x[..., 3:] = 0.0
    return x


def forward_view(model: SurmoModel, dataset: Dataset, t: int, cam: Camera, cfg: TrainConfig,
                 rng: np.random.Generator | None = None, gt: np.ndarray | None = None,
                 with_motion: bool | None = None) -> StepResult:
    """One frame/camera pass: encode, optionally decode motion, render, super-resolve, losses."""
    with_motion = cfg.predict_motion if with_motion is None else with_motion
    tp = model.encode_motion(model_input(dataset, t, cfg.dynamics_cond, model.dtype))
    terms = {}
    if with_motion and t + 1 < dataset.n_frames:
        pred = model.decode_motion(tp, dataset.uv_mask)
        n_gt, v_gt = dataset.motion_targets(t, cfg.velocity_target)
        terms["norm"] = loss_normal(pred.normal, n_gt.astype(model.dtype), dataset.uv_mask)
        # velocities are compared in units of the typical per-frame displacement
        k = 1.0 / model.config.velocity_scale
        terms["vel"] = loss_velocity(T.scale(pred.velocity_next, k), (v_gt * k).astype(model.dtype),
                                     dataset.uv_mask)
    low = cam.scaled(1.0 / model.config.sr_factor)
    out = render_feature_image(model, dataset.mesh(t), dataset.bvh(t), low, RenderConfig(cfg.n_samples),
                               triplane=tp, rng=rng, h_max=model.config.h_max)
    rgb = model.super_resolve(out.features)
    if gt is not None:
        terms["pix"] = loss_pixel(rgb, gt.astype(model.dtype))
        gt_low = area_downsample(gt, model.config.sr_factor).astype(model.dtype)
        terms["vol"] = loss_volume(out.features, gt_low)
    total = total_loss(cfg.weights, terms.get("pix"), terms.get("vel"), terms.get("norm"), terms.get("vol"))
    return StepResult(total, terms, rgb, out.features, out.opacity, out.n_field_evals)


@dataclass
class TrainResult:
    model: SurmoModel
    history: list = field(default_factory=list)
    seconds: float = 0.0


def _row(step, res: StepResult, gt) -> dict:
    val = {k: float(v.data) for k, v in res.terms.items()}
    return {
        "step": step,
        "loss_total": float(res.total.data),
        "loss_pix": val.get("pix", 0.0),
        "loss_vel": val.get("vel", 0.0),
        "loss_norm": val.get("norm", 0.0),
        "loss_vol": val.get("vol", 0.0),
        "psnr": psnr(res.rgb.data, gt),
    }


def train(model: SurmoModel, dataset: Dataset, cfg: TrainConfig, csv_path: str | Path | None = None,
          progress=None) -> TrainResult:
    """Adam on random (frame, training camera) pairs.

    Frames are drawn from 0..T-2 so that the next-step velocity target
    exists. One CSV row is written every ``log_every`` steps, the first at
    step 0 (before any update).
    """
    if cfg.triplane_kind != model.config.triplane_kind:
        raise ValueError(f"model uses a {model.config.triplane_kind} triplane, config asks for {cfg.triplane_kind}")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult(model)
    start = time.perf_counter()
    fh = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.DictWriter(fh, fieldnames=CSV_HEADER) if fh else None
    if writer:
        writer.writeheader()
    try:
        last = max(dataset.n_frames - 1, 1)
        for step in range(cfg.steps):
            t = int(rng.integers(0, last))
            c = int(rng.integers(0, len(dataset.train_cameras)))
            gt = dataset.image("train", c, t)
            opt.zero_grad()
            res = forward_view(model, dataset, t, dataset.train_cameras[c], cfg, rng=rng, gt=gt)
            loss = float(res.total.data)
            if not np.isfinite(loss):
                terms = {k: float(v.data) for k, v in res.terms.items()}
                raise TrainingDiverged(f"non-finite loss at step {step} (frame {t}, camera {c}): {terms}")
            res.total.backward()
            if step % cfg.log_every == 0:
                row = _row(step, res, gt)
                result.history.append(row)
                if writer:
                    writer.writerow(row)
            opt.step()
            if progress:
                progress(step, res)
    finally:
        if fh:
            fh.close()
    result.seconds = time.perf_counter() - start
    return result


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalRow:
    camera: int
    frame: int
    psnr: float
    ssim: float
    loss_pix: float


def render_rgb(model: SurmoModel, dataset: Dataset, t: int, cam: Camera, dynamics_cond: bool = True,
               n_samples: int = 64) -> np.ndarray:
    cfg = TrainConfig(steps=1, dynamics_cond=dynamics_cond, predict_motion=False,
                      triplane_kind=model.config.triplane_kind, n_samples=n_samples)
    return forward_view(model, dataset, t, cam, cfg, rng=None).rgb.data


def evaluate(model: SurmoModel, dataset: Dataset, frames=None, cameras=None, dynamics_cond: bool = True,
             n_samples: int = 64) -> list[EvalRow]:
    """Metrics on held-out cameras with deterministic (midpoint) sampling."""
    frames = range(dataset.n_frames) if frames is None else frames
    cameras = range(len(dataset.test_cameras)) if cameras is None else cameras
    rows = []
    for c in cameras:
        for t in frames:
            gt = dataset.image("test", c, t)
            rgb = render_rgb(model, dataset, t, dataset.test_cameras[c], dynamics_cond, n_samples)
            rows.append(EvalRow(c, t, psnr(rgb, gt), ssim(rgb, gt), float(np.abs(rgb - gt).mean())))
    return rows


def write_eval_csv(rows: list[EvalRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["camera", "frame", "psnr", "ssim", "loss_pix"])
        for r in rows:
            w.writerow([r.camera, r.frame, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.loss_pix:.6f}"])
