"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line."""

import csv
import time
import zlib

import numpy as np
import pytest

from conftest import grid_mesh, micro_pipeline
from surmo import io
from surmo import tensor as T
from surmo.cli import main
from surmo.errors import ChecksumError
from surmo.geometry import build_bvh, local_to_world, nearest_faces, nearest_faces_brute, surface_local_coords
from surmo.model import SurmoModel
from surmo.motion import TrajectoryConfig, compute_velocity, normal_uv, trajectory_from_velocities
from surmo.renderer import Camera, integrate_volume
from surmo.synth import ToyBodySpec, build_dataset
from surmo.tensor import Tensor, gradcheck, precision
from surmo.training import TrainConfig, default_model_config, evaluate, train
from test_cli import _pipeline
from test_renderer import _piecewise_field, _quadrature, _samples
from test_tensor import OPS

ABLATION_MODEL = dict(plane_channels=8, encoder_channels=(16, 16, 16), decoder_channels=(16, 16, 16), res_blocks=1,
                      motion_hidden=16, mlp_width=32, color_hidden=32, feature_channels=16, sr_hidden=16)
ABLATION_STEPS = 1500


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


# ------------------------------------------------------------------ geometry

def test_geometry_suite(capsys, toy_body):
    start = time.perf_counter()
    mesh = toy_body.frame(10)
    bvh = build_bvh(mesh)
    rng = np.random.default_rng(0)
    f = rng.integers(0, mesh.n_faces, 1000)
    w = rng.dirichlet([1, 1, 1], 1000)
    p = np.einsum("ni,nij->nj", w, mesh.vertices[mesh.faces[f]])
    roundtrip = float(np.abs(local_to_world(mesh, surface_local_coords(bvh, mesh, p)) - p).max())

    big = grid_mesh(50)
    q = np.random.default_rng(1).uniform([-0.3, -0.3, -0.6], [1.3, 1.3, 0.6], size=(1000, 3))
    a = nearest_faces(build_bvh(big), big, q)
    b = nearest_faces_brute(big, q)
    agree = float(np.mean(a.distance == b.distance))
    sec = time.perf_counter() - start
    ok = roundtrip < 1e-6 and agree == 1.0 and big.n_faces <= 5000 and sec < 10
    report(capsys, "geometry", ok, f"roundtrip {roundtrip:.2e} (<1e-6), BVH agreement {agree:.1%} on "
           f"{big.n_faces} faces, {sec:.1f}s (<10s)")


# ------------------------------------------------------------------ gradients

def test_gradient_suite(capsys, small_dataset):
    start = time.perf_counter()
    errs = {}
    for name, build in OPS.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        with precision(np.float64):
            leaves, op = build(rng)
            w = Tensor(np.random.default_rng(0).normal(size=op(*leaves).shape))
            errs[name] = gradcheck(lambda: T.sum_all(T.mul(op(*leaves), w)), leaves)
    model, loss = micro_pipeline(small_dataset)
    with precision(np.float64):
        for name, p in model.params.items():
            errs["pipeline:" + name] = gradcheck(loss, [p], eps=1e-6, max_entries=3, rng=np.random.default_rng(0))
    sec = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and sec < 60
    report(capsys, "gradients", ok, f"{len(OPS)} ops + {len(model.params)} pipeline params, worst {worst} "
           f"{errs[worst]:.2e} (<1e-4), {sec:.1f}s (<60s)")


# ------------------------------------------------------------------ volume rendering

def test_volume_rendering_oracle(capsys):
    worst_q = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        edges, sigma, color = _piecewise_field(rng, 8, rng.uniform(0.5, 2.0))
        f8, a8 = _quadrature(edges, sigma, color, 8)
        f4k, a4k = _quadrature(edges, sigma, color, 4096)
        worst_q = max(worst_q, float(np.abs(f8 - f4k).max()), abs(a8 - a4k))
    sig, delta = np.meshgrid(np.linspace(0, 50, 21), np.geomspace(1e-3, 2, 15))
    worst_a = 0.0
    for s, d in zip(sig.ravel(), delta.ravel()):
        with precision(np.float64):
            _, acc = integrate_volume(_samples(np.array([[0.0, d]])), Tensor(np.ones((1, 1))), Tensor(np.array([s])))
        worst_a = max(worst_a, abs(acc.data[0] - (1 - np.exp(-s * d))))
    ok = worst_q <= 1e-3 and worst_a <= 1e-9
    report(capsys, "volume rendering", ok, f"8 vs 4096 samples {worst_q:.2e} (<=1e-3), single-sample alpha "
           f"{worst_a:.1e} (<=1e-9)")


# ------------------------------------------------------------------ motion identities

def test_motion_identities(capsys, toy_body):
    exact = True
    for t in range(len(toy_body) - 1):
        v_next = compute_velocity(toy_body, t + 1)
        a = normal_uv(toy_body.frame(t).with_vertices(toy_body.positions[t] + v_next), 128)
        b = normal_uv(toy_body.frame(t + 1), 128)
        exact &= bool(np.array_equal(a.data, b.data) and np.array_equal(a.mask, b.mask))
    cases = [
        (TrajectoryConfig(2, (1.0, 1.0)), [[2.0, 0, 0]], [[[1.0, 0, 0]], [[3.0, 0, 0]]], [[4.0, 0, 0]]),
        (TrajectoryConfig(), [[0.3, -1.0, 2.0]], [[[0.0, 0, 0]]] * 5, [[0.3, -1.0, 2.0]]),
        (TrajectoryConfig(3, (1.0, 0.5, 0.25)), [[1.0, 1.0, 1.0]], [[[0.2, 0, -0.4]]] * 3, [[1.2, 1.0, 0.6]]),
    ]
    worst = max(float(np.abs(trajectory_from_velocities(np.array(p), [np.array(v) for v in vs], cfg) - e).max())
                for cfg, p, vs, e in cases)
    ok = exact and worst < 1e-9
    report(capsys, "motion identities", ok, f"normal map of P_t+V_t+1 equals t+1 map exactly: {exact}; "
           f"trajectory cases max error {worst:.1e} (<1e-9)")


# ------------------------------------------------------------------ training, filtering, occupancy

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    ds = build_dataset(ToyBodySpec())
    model = SurmoModel(default_model_config(ds), seed=0)
    frames = range(0, ds.n_frames, 6)
    before = np.mean([r.psnr for r in evaluate(model, ds, frames=frames)])
    csv_path = tmp_path_factory.mktemp("train") / "train.csv"
    result = train(model, ds, TrainConfig(steps=2000, seed=0), csv_path=csv_path)
    after = np.mean([r.psnr for r in evaluate(model, ds, frames=frames)])
    ckpt = csv_path.with_name("model.ckpt")
    io.save_checkpoint(ckpt, model)
    return dict(before=before, after=after, history=result.history, seconds=result.seconds, ckpt=ckpt)


@pytest.mark.slow
def test_training_convergence(capsys, trained):
    h = trained["history"]
    ratio = h[-1]["loss_total"] / h[0]["loss_total"]
    gain = trained["after"] - trained["before"]
    ok = gain >= 6 and ratio < 0.25 and trained["seconds"] < 1800 and len(h) == 2000
    report(capsys, "training", ok, f"held-out PSNR {trained['before']:.2f} -> {trained['after']:.2f} dB "
           f"(+{gain:.2f}, >=6), final/initial loss {ratio:.3f} (<0.25), {trained['seconds'] / 60:.1f} min (<30)")


@pytest.mark.slow
def test_filtering_bench(capsys, trained, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--ckpt", str(trained["ckpt"]), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    total = {r["mode"]: int(r["field_evals"]) for r in rows if r["frame"] == "all"}
    diff = max(float(r["max_abs_diff"]) for r in rows if r["frame"] != "all")
    reduction = 1 - total["filtered"] / total["unfiltered"]
    ok = diff <= 1e-6 and reduction >= 0.5
    report(capsys, "filtering", ok, f"max |filtered - unfiltered| {diff:.1e} (<=1e-6), "
           f"{reduction:.1%} fewer field evaluations (>=50%)")


@pytest.mark.slow
def test_occupancy_surface_beats_volumetric(capsys, trained, tmp_path):
    out = tmp_path / "occ.csv"
    assert main(["ablate-occupancy", "--ckpt", str(trained["ckpt"]), "--out", str(out)]) == 0
    frac = {r["triplane"]: float(r["fraction"]) for r in csv.DictReader(open(out))}
    ok = frac["surface"] > frac["volumetric"]
    report(capsys, "ablation occupancy", ok, f"surface {frac['surface']:.3f} > volumetric {frac['volumetric']:.3f}")


# ------------------------------------------------------------------ motion ablation

@pytest.mark.slow
def test_motion_ablation_order(capsys):
    ds = build_dataset(ToyBodySpec(image_size=64, uv_res=64))
    variants = {"P_cond": (False, False), "+D_cond": (True, False), "+V_pred+N_pred": (True, True)}
    losses = {k: [] for k in variants}
    for seed in (0, 1, 2):
        for name, (dyn, pred) in variants.items():
            model = SurmoModel(default_model_config(ds, **ABLATION_MODEL), seed=seed)
            train(model, ds, TrainConfig(steps=ABLATION_STEPS, seed=seed, dynamics_cond=dyn, predict_motion=pred,
                                         n_samples=32))
            rows = evaluate(model, ds, frames=range(0, ds.n_frames, 3), dynamics_cond=dyn, n_samples=32)
            losses[name].append(float(np.mean([r.loss_pix for r in rows])))
    med = {k: float(np.median(v)) for k, v in losses.items()}
    ok = med["P_cond"] >= med["+D_cond"] >= med["+V_pred+N_pred"]
    report(capsys, "ablation motion", ok, "median held-out L1 " +
           " >= ".join(f"{k} {v:.5f}" for k, v in med.items()))


# ------------------------------------------------------------------ I/O

def test_io_roundtrips_and_cli_determinism(capsys, tmp_path, toy_body, small_dataset):
    exact = []
    io.write_mesh_sequence(tmp_path / "s.smsq", toy_body)
    back = io.read_mesh_sequence(tmp_path / "s.smsq")
    exact.append(back.positions.tobytes() == toy_body.positions.tobytes())
    io.write_mesh_sequence(tmp_path / "s2.smsq", back)
    exact.append((tmp_path / "s.smsq").read_bytes() == (tmp_path / "s2.smsq").read_bytes())
    cam = Camera.look_at([1.1, 0.3, 2.7], [0, 0.5, 0], [0, 1, 0], 200.1, 201.7, 63.9, 64.2, 128, 128)
    io.write_camera(tmp_path / "c.cam", cam)
    exact.append(io.read_camera(tmp_path / "c.cam").extrinsic.tobytes() == cam.extrinsic.tobytes())
    img = np.random.default_rng(0).integers(0, 256, (9, 7, 3), dtype=np.uint8)
    io.write_ppm(tmp_path / "i.ppm", img)
    exact.append(np.array_equal(io.read_ppm(tmp_path / "i.ppm"), img))
    fm = np.random.default_rng(1).normal(size=(8, 8, 9)).astype(np.float32)
    io.write_float_map(tmp_path / "m.fmap", fm, fm[..., 0] > 0)
    exact.append(io.read_float_map(tmp_path / "m.fmap")[0].tobytes() == fm.tobytes())
    model = SurmoModel(default_model_config(small_dataset), seed=5)
    io.save_checkpoint(tmp_path / "a.ckpt", model)
    loaded = io.load_checkpoint(tmp_path / "a.ckpt")
    exact.append(all(loaded.p(k).data.tobytes() == model.p(k).data.tobytes() for k in model.params))

    data = (tmp_path / "a.ckpt").read_bytes()
    rejected = 0
    rng = np.random.default_rng(2)
    for pos in rng.choice(np.arange(12, len(data)), 25, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 0x10
        (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
        try:
            io.load_checkpoint(tmp_path / "bad.ckpt")
        except ChecksumError:
            rejected += 1

    a, b = _pipeline(tmp_path / "r1", 3), _pipeline(tmp_path / "r2", 3)
    same = all((a / n).read_bytes() == (b / n).read_bytes() for n in ("model.csv", "eval.csv", "r.fmap", "r.ppm"))
    ok = all(exact) and rejected == 25 and same
    report(capsys, "I/O", ok, f"bit-exact roundtrips {sum(exact)}/{len(exact)}, corrupted checkpoints rejected "
           f"{rejected}/25, CLI pipeline deterministic: {same}")
