"""Command line interface.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (unknown flag, bad value)
    3  a referenced file does not exist
    4  a file exists but is malformed (magic, version, truncation, checksum)
    5  training diverged (non-finite loss)

Failures print exactly one line to stderr::

    surmo: error kind=<usage|missing-file|format|diverged|internal>: <message>

Options can also come from a TOML file given with ``--config``. Keys in a
table named after the subcommand (``[train]``) or at top level set option
defaults; command line flags override them.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# built-in defaults per subcommand; argparse defaults stay None so config files can fill gaps
DEFAULTS = {
    "synth-data": {"spec": None, "seed": None},
    "extract-motion": {"window": 5, "decay": 0.8, "res": None},
    "train": {"steps": 2000, "seed": 0, "lr": 1e-3, "dynamics": True, "motion_pred": True,
              "triplane": "surface", "velocity_target": "next", "samples": 64, "csv": None},
    "render": {"frame": 0, "samples": 64, "float_out": None, "seed": 0},
    "eval": {"cameras": "held-out", "frames": None, "samples": 64, "seed": 0},
    "ablate-occupancy": {"seq": None, "frame": 0, "points": 100000, "seed": 0},
    "bench": {"data": None, "camera_index": 0, "frames": None, "samples": 64, "seed": 0},
}


def _common(p):
    p.add_argument("--config", help="TOML file with option defaults")
    p.add_argument("--threads", type=int, help="worker threads (default: SURMO_THREADS or CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surmo", description="Surface-based motion representation toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth-data", help="generate the toy dataset")
    _common(p)
    p.add_argument("--spec", help="TOML toy body spec (default: built-in)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="texture seed")

    p = sub.add_parser("extract-motion", help="write per-frame 9-channel UV motion maps")
    _common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--decay", type=float)
    p.add_argument("--res", type=int, help="UV resolution (default: the sequence's hint)")
    p.add_argument("--seed", type=int, help="accepted for uniformity; extraction is deterministic")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-dynamics", dest="dynamics", action="store_const", const=False)
    p.add_argument("--no-motion-pred", dest="motion_pred", action="store_const", const=False)
    p.add_argument("--triplane", choices=["surface", "volumetric"])
    p.add_argument("--velocity-target", choices=["next", "current"])
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--csv", help="metrics CSV (default: checkpoint path with .csv suffix)")

    p = sub.add_parser("render", help="render one frame from a camera")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--frame", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--float-out", help="also write the unquantized image as a float map")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="PSNR/SSIM per view and frame")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cameras", choices=["held-out", "train"])
    p.add_argument("--frames", help="comma-separated frame list (default: all)")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("ablate-occupancy", help="surface vs volumetric triplane utilization")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seq", help="mesh sequence (default: the built-in toy body)")
    p.add_argument("--frame", type=int)
    p.add_argument("--points", type=int, help="number of shell sample points")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("bench", help="radiance-field evaluations, filtered vs unfiltered")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory (default: the built-in toy scene)")
    p.add_argument("--camera-index", type=int, help="held-out camera index")
    p.add_argument("--frames", help="comma-separated frame list (default: every 6th frame)")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    return parser


def _load_toml(path) -> dict:
    import tomli

    if not Path(path).exists():
        raise FileNotFoundError(f"config file {path} not found")
    with open(path, "rb") as fh:
        return tomli.load(fh)


def resolve_options(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then from built-in defaults."""
    defaults = DEFAULTS[args.command]
    conf = {}
    if args.config:
        raw = _load_toml(args.config)
        known = set(vars(args)) | set(defaults)
        # top-level keys are shared by all subcommands and apply where they make sense
        conf = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
        conf = {k: v for k, v in conf.items() if k in known}
        section = {k.replace("-", "_"): v for k, v in raw.get(args.command, {}).items()}
        unknown = sorted(set(section) - known)
        if unknown:
            raise UsageError(f"unknown keys in [{args.command}]: {unknown}")
        conf.update(section)
    for key in set(defaults) | set(conf):
        if getattr(args, key, None) is None:
            setattr(args, key, conf.get(key, defaults.get(key)))
    return args


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("SURMO_THREADS"):
        try:
            n = int(os.environ["SURMO_THREADS"])
        except ValueError:
            raise UsageError(f"SURMO_THREADS must be an integer, got {os.environ['SURMO_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} not found")
    return p


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def dump_toml(d: dict) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in d.items())


# ------------------------------------------------------------------ commands

def cmd_synth_data(args) -> None:
    from . import io, synth

    values = {}
    if args.spec:
        values = _load_toml(_need(args.spec))
    if args.seed is not None:
        values["texture_seed"] = args.seed
    try:
        spec = synth.ToyBodySpec.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad toy spec: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth.build_dataset(spec)
    io.write_dataset(out, ds, clothed=synth.generate_sequence(spec, clothed=True),
                     texture=synth.make_texture(spec))
    (out / "spec.toml").write_text(dump_toml(spec.to_dict()))
    print(f"wrote {ds.n_frames} frames, {len(ds.train_cameras)} train / {len(ds.test_cameras)} test views to {out}")


def cmd_extract_motion(args) -> None:
    from . import io
    from .motion import TrajectoryConfig, extract_motion, motion_to_uv

    seq = io.read_mesh_sequence(_need(args.seq))
    res = args.res or seq.uv_resolution
    try:
        traj = TrajectoryConfig.decaying(args.window, args.decay)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(len(seq)):
        uv = motion_to_uv(extract_motion(seq, t, traj), seq.frame(t), res)
        io.write_float_map(out / f"frame_{t:04d}.fmap", uv.data, uv.mask)
    print(f"wrote {len(seq)} motion maps at {res}x{res} to {out}")


def _dataset(path):
    from . import io

    root = _need(path)
    return io.read_dataset(root)


def cmd_train(args) -> None:
    from . import io
    from .model import SurmoModel
    from .training import TrainConfig, default_model_config, train

    ds = _dataset(args.data)
    try:
        cfg = TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed, dynamics_cond=bool(args.dynamics),
                          predict_motion=bool(args.motion_pred), triplane_kind=args.triplane,
                          velocity_target=args.velocity_target, n_samples=args.samples)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = SurmoModel(default_model_config(ds, args.triplane), seed=args.seed)
    csv_path = args.csv or Path(args.out).with_suffix(".csv")
    result = train(model, ds, cfg, csv_path=csv_path)
    io.save_checkpoint(args.out, model)
    last = result.history[-1]
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s; last logged loss {last['loss_total']:.6f}; "
          f"checkpoint {args.out}; metrics {csv_path}")


def _render_frame(model, seq, t, cam, samples):
    from .training import Dataset, render_rgb

    ds = Dataset(seq, [], [], np.zeros((0,)), np.zeros((0,)), uv_res=model.config.uv_res)
    return render_rgb(model, ds, t, cam, n_samples=samples)


def cmd_render(args) -> None:
    from . import io

    model = io.load_checkpoint(_need(args.ckpt))
    seq = io.read_mesh_sequence(_need(args.seq))
    cam = io.read_camera(_need(args.camera))
    if not 0 <= args.frame < len(seq):
        raise UsageError(f"frame {args.frame} outside 0..{len(seq) - 1}")
    if cam.width % model.config.sr_factor or cam.height % model.config.sr_factor:
        raise UsageError(f"camera size must be divisible by {model.config.sr_factor}")
    rgb = _render_frame(model, seq, args.frame, cam, args.samples)
    io.write_ppm(args.out, rgb)
    if args.float_out:
        io.write_float_map(args.float_out, rgb)
    print(f"wrote {cam.width}x{cam.height} render of frame {args.frame} to {args.out}")


def cmd_eval(args) -> None:
    from . import io
    from .training import evaluate, write_eval_csv

    model = io.load_checkpoint(_need(args.ckpt))
    ds = _dataset(args.data)
    if args.cameras == "train":
        ds.test_cameras, ds.test_images = ds.train_cameras, ds.train_images
    frames = _frame_list(args.frames, ds.n_frames, range(ds.n_frames))
    rows = evaluate(model, ds, frames=frames, n_samples=args.samples)
    write_eval_csv(rows, args.out)
    print(f"{len(rows)} rows; mean PSNR {np.mean([r.psnr for r in rows]):.3f} dB, "
          f"mean SSIM {np.mean([r.ssim for r in rows]):.4f}")


def cmd_ablate_occupancy(args) -> None:
    from . import io, synth
    from .geometry import build_bvh
    from .tensor import Tensor
    from .triplane import SurfaceTriplane, VolumetricTriplane, occupancy_stats

    model = io.load_checkpoint(_need(args.ckpt))
    c = model.config
    seq = io.read_mesh_sequence(_need(args.seq)) if args.seq else synth.generate_sequence(synth.ToyBodySpec())
    mesh = seq.frame(args.frame)
    bvh = build_bvh(mesh)
    planes = Tensor(np.zeros((c.uv_res, c.uv_res, c.triplane_channels), np.float32))
    rows = []
    for kind, tp in (("surface", SurfaceTriplane(planes, c.h_max)),
                     ("volumetric", VolumetricTriplane(planes, np.array(c.box_lo), np.array(c.box_hi)))):
        rep = occupancy_stats(tp, mesh, bvh, args.points, np.random.default_rng(args.seed), h_max=c.h_max)
        rows.append([kind, *(f"{x:.6f}" for x in rep.per_plane), f"{rep.fraction:.6f}"])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["triplane", "plane0", "plane1", "plane2", "fraction"])
        w.writerows(rows)
    print(f"surface {rows[0][-1]}, volumetric {rows[1][-1]}")


def _frame_list(text, n_frames, default):
    if not text:
        return list(default)
    try:
        frames = [int(x) for x in str(text).split(",")]
    except ValueError as exc:
        raise UsageError(f"bad frame list {text!r}: {exc}") from exc
    bad = [t for t in frames if not 0 <= t < n_frames]
    if bad:
        raise UsageError(f"frames {bad} outside 0..{n_frames - 1}")
    return frames


def cmd_bench(args) -> None:
    from . import io, synth
    from .renderer import RenderConfig, render_feature_image
    from .training import model_input

    model = io.load_checkpoint(_need(args.ckpt))
    if args.data:
        ds = _dataset(args.data)
    else:
        ds = synth.build_dataset(synth.ToyBodySpec(uv_res=model.config.uv_res))
    if not 0 <= args.camera_index < len(ds.test_cameras):
        raise UsageError(f"camera index {args.camera_index} outside 0..{len(ds.test_cameras) - 1}")
    cam = ds.test_cameras[args.camera_index].scaled(1.0 / model.config.sr_factor)
    frames = _frame_list(args.frames, ds.n_frames, range(0, ds.n_frames, 6))
    rows = []
    totals = {"filtered": [0, 0, 0.0], "unfiltered": [0, 0, 0.0]}
    for t in frames:
        tp = model.encode_motion(model_input(ds, t, True, model.dtype))
        feats = {}
        for mode, flt in (("filtered", True), ("unfiltered", False)):
            start = time.perf_counter()
            out = render_feature_image(model, ds.mesh(t), ds.bvh(t), cam, RenderConfig(args.samples, flt),
                                       triplane=tp, h_max=model.config.h_max)
            sec = time.perf_counter() - start
            feats[mode] = (out, sec)
            tot = totals[mode]
            tot[0] += out.n_field_evals
            tot[1] += out.n_samples_in_box
            tot[2] += sec
        diff = float(np.abs(feats["filtered"][0].features.data - feats["unfiltered"][0].features.data).max())
        for mode, (out, sec) in feats.items():
            rows.append([t, mode, out.n_field_evals, out.n_samples_in_box, f"{sec:.6f}", f"{diff:.3e}"])
    for mode, (ev, inbox, sec) in totals.items():
        rows.append(["all", mode, ev, inbox, f"{sec:.6f}", ""])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "mode", "field_evals", "samples_in_box", "seconds", "max_abs_diff"])
        w.writerows(rows)
    f, u = totals["filtered"][0], totals["unfiltered"][0]
    print(f"field evaluations over {len(frames)} frames: filtered {f}, unfiltered {u} "
          f"({100.0 * (1 - f / max(u, 1)):.1f}% fewer)")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "extract-motion": cmd_extract_motion,
    "train": cmd_train,
    "render": cmd_render,
    "eval": cmd_eval,
    "ablate-occupancy": cmd_ablate_occupancy,
    "bench": cmd_bench,
}


def _fail(kind: str, code: int, exc) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"surmo: error kind={kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    from .errors import FormatError, TrainingDiverged

    try:
        args = resolve_options(build_parser().parse_args(argv))
        with threadpool_limits(limits=_threads(args)):
            COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except FileNotFoundError as exc:
        return _fail("missing-file", EXIT_MISSING, exc)
    except FormatError as exc:
        return _fail("format", EXIT_FORMAT, exc)
    except TrainingDiverged as exc:
        return _fail("diverged", EXIT_DIVERGED, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        import tomli

        if isinstance(exc, tomli.TOMLDecodeError):
            return _fail("format", EXIT_FORMAT, exc)
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
