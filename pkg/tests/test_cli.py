import csv
import re
import subprocess
import sys

import numpy as np
import pytest

from surmo import io
from surmo.cli import DEFAULTS, build_parser, main, resolve_options

SPEC = "frames = 6\nimage_size = 32\nuv_res = 32\ntexture_res = 64\n"
ERROR_LINE = re.compile(r"^surmo: error kind=(usage|missing-file|format|diverged|internal): \S.*$")


def _run(*argv):
    assert main([str(a) for a in argv]) == 0


def _pipeline(root, seed):
    root.mkdir()
    spec = root / "spec.toml"
    spec.write_text(SPEC)
    data = root / "data"
    _run("synth-data", "--spec", spec, "--out", data)
    _run("extract-motion", "--seq", data / "body.smsq", "--out", data / "motion")
    ckpt = root / "model.ckpt"
    _run("train", "--data", data, "--out", ckpt, "--steps", 2, "--seed", seed, "--samples", 8)
    _run("render", "--ckpt", ckpt, "--seq", data / "body.smsq", "--camera", data / "cameras" / "test_0.cam",
         "--frame", 3, "--out", root / "r.ppm", "--float-out", root / "r.fmap", "--samples", 8, "--seed", seed)
    _run("eval", "--ckpt", ckpt, "--data", data, "--out", root / "eval.csv", "--samples", 8, "--seed", seed)
    return root


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return _pipeline(base / "a", 0), _pipeline(base / "b", 0), _pipeline(base / "c", 1)


def test_smoke_path_outputs(runs):
    root = runs[0]
    data = root / "data"
    assert (data / "body.smsq").exists() and (data / "clothed.smsq").exists()
    assert len(list((data / "motion").glob("*.fmap"))) == 6
    m, mask = io.read_float_map(data / "motion" / "frame_0002.fmap")
    assert m.shape == (32, 32, 9) and mask.shape == (32, 32)
    rows = list(csv.reader(open(root / "model.csv")))
    assert rows[0][0] == "step" and len(rows) == 3
    assert io.load_checkpoint(root / "model.ckpt").config.uv_res == 32


def test_render_dimensions_follow_camera(runs):
    root = runs[0]
    cam = io.read_camera(root / "data" / "cameras" / "test_0.cam")
    img = io.read_ppm(root / "r.ppm")
    assert img.shape == (cam.height, cam.width, 3) == (32, 32, 3)
    rgb, _ = io.read_float_map(root / "r.fmap")
    np.testing.assert_array_equal(io.quantize(rgb), img)


def test_render_other_camera_size(runs, tmp_path):
    root = runs[0]
    cam = io.read_camera(root / "data" / "cameras" / "test_1.cam").scaled(1.5)
    io.write_camera(tmp_path / "big.cam", cam)
    _run("render", "--ckpt", root / "model.ckpt", "--seq", root / "data" / "body.smsq", "--camera",
         tmp_path / "big.cam", "--out", tmp_path / "big.ppm", "--samples", 4)
    assert io.read_ppm(tmp_path / "big.ppm").shape == (48, 48, 3)


def test_eval_row_count(runs):
    lines = (runs[0] / "eval.csv").read_text().splitlines()
    # 2 held-out views x 6 frames
    assert len(lines) - 1 == 2 * 6


def test_pipeline_deterministic_per_seed(runs):
    a, b, c = runs
    for name in ("model.csv", "eval.csv", "r.fmap", "r.ppm", "model.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for rel in ("data/body.smsq", "data/motion/frame_0004.fmap", "data/images/test_1/frame_0005.ppm"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    assert (a / "model.ckpt").read_bytes() != (c / "model.ckpt").read_bytes()


def test_threads_do_not_change_results(runs, tmp_path):
    root = runs[0]
    args = ["render", "--ckpt", root / "model.ckpt", "--seq", root / "data" / "body.smsq", "--camera",
            root / "data" / "cameras" / "test_0.cam", "--frame", 3, "--samples", 8]
    _run(*args, "--out", tmp_path / "1.ppm", "--float-out", tmp_path / "1.fmap", "--threads", 1)
    _run(*args, "--out", tmp_path / "2.ppm", "--float-out", tmp_path / "2.fmap", "--threads", 3)
    assert (tmp_path / "1.fmap").read_bytes() == (tmp_path / "2.fmap").read_bytes() == (root / "r.fmap").read_bytes()


def test_ablate_occupancy_and_bench(runs, tmp_path):
    root = runs[0]
    _run("ablate-occupancy", "--ckpt", root / "model.ckpt", "--seq", root / "data" / "body.smsq",
         "--out", tmp_path / "occ.csv", "--points", 2000)
    rows = list(csv.reader(open(tmp_path / "occ.csv")))
    assert rows[0] == ["triplane", "plane0", "plane1", "plane2", "fraction"]
    assert [r[0] for r in rows[1:]] == ["surface", "volumetric"]
    assert float(rows[1][-1]) > float(rows[2][-1])
    _run("bench", "--ckpt", root / "model.ckpt", "--data", root / "data", "--out", tmp_path / "b.csv",
         "--frames", "0,3", "--samples", 16)
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    total = {r["mode"]: int(r["field_evals"]) for r in rows if r["frame"] == "all"}
    assert total["filtered"] < total["unfiltered"]
    assert all(float(r["max_abs_diff"]) <= 1e-6 for r in rows if r["frame"] != "all")


def _err(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), lines
    return lines[0]


def test_exit_code_usage(capsys):
    assert main(["train", "--data", "x", "--out", "y", "--bogus"]) == 2
    assert "kind=usage" in _err(capsys)
    assert main(["frobnicate"]) == 2
    _err(capsys)
    assert main(["render", "--ckpt", "a"]) == 2
    _err(capsys)


def test_exit_code_missing_file(capsys, tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "m.ckpt")]) == 3
    assert "kind=missing-file" in _err(capsys)
    assert main(["extract-motion", "--seq", str(tmp_path / "none.smsq"), "--out", str(tmp_path)]) == 3
    _err(capsys)


def test_exit_code_format(capsys, runs, tmp_path):
    bad = tmp_path / "bad.ckpt"
    data = bytearray((runs[0] / "model.ckpt").read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad.write_bytes(bytes(data))
    argv = ["render", "--ckpt", str(bad), "--seq", str(runs[0] / "data" / "body.smsq"), "--camera",
            str(runs[0] / "data" / "cameras" / "test_0.cam"), "--out", str(tmp_path / "x.ppm")]
    assert main(argv) == 4
    line = _err(capsys)
    assert "kind=format" in line and "checksum" in line.lower()
    notseq = tmp_path / "x.smsq"
    notseq.write_bytes(b"hello")
    assert main(["extract-motion", "--seq", str(notseq), "--out", str(tmp_path)]) == 4
    _err(capsys)


def test_codes_distinct():
    from surmo.cli import EXIT_FORMAT, EXIT_MISSING, EXIT_USAGE

    assert len({EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, 0}) == 4


def _resolve(argv):
    return resolve_options(build_parser().parse_args(argv))


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.toml"
    conf.write_text("seed = 7\nsamples = 12\n[train]\nsteps = 33\nlr = 0.01\n")
    base = ["train", "--data", "d", "--out", "o"]
    a = _resolve(base)
    assert (a.steps, a.seed, a.lr, a.samples) == (DEFAULTS["train"]["steps"], 0, 1e-3, 64)
    b = _resolve(base + ["--config", str(conf)])
    assert (b.steps, b.seed, b.lr, b.samples) == (33, 7, 0.01, 12)
    c = _resolve(base + ["--config", str(conf), "--steps", "5", "--seed", "1"])
    assert (c.steps, c.seed, c.lr) == (5, 1, 0.01)
    assert c.dynamics is True
    d = _resolve(base + ["--no-dynamics"])
    assert d.dynamics is False


def test_config_unknown_key(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text("[train]\nstepz = 3\n")
    assert main(["train", "--data", "d", "--out", "o", "--config", str(conf)]) == 2
    assert "stepz" in _err(capsys)


def test_threads_env(monkeypatch):
    from surmo.cli import UsageError, _threads

    args = _resolve(["bench", "--ckpt", "c", "--out", "o"])
    monkeypatch.setenv("SURMO_THREADS", "3")
    assert _threads(args) == 3
    args.threads = 2
    assert _threads(args) == 2
    args.threads = None
    monkeypatch.setenv("SURMO_THREADS", "many")
    with pytest.raises(UsageError):
        _threads(args)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "surmo", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in DEFAULTS:
        assert cmd in out.stdout
