import json
import subprocess
import sys

import numpy as np
import pytest

from repapq import analysis, cli
from repapq.data import make_synthetic_cifar
from repapq.graph import build_reference_graph, forward_fp, load_model, save_model
from repapq.training import TrainConfig, train_desk
from repapq.data import load_cifar10_dir


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_synthetic_cifar(root / "data", 256, 64, seed=0)
    g = build_reference_graph(widths=(8, 8, 16), depths=(1, 2, 2), seed=0)
    train_desk(g, load_cifar10_dir(root / "data"), TrainConfig(epochs=1, seed=0))
    m, w = save_model(g, root / "model", "fp")
    return root, str(m), str(w), str(root / "data")


def _run(*argv):
    return subprocess.run([sys.executable, "-m", "repapq", *argv], capture_output=True, text=True)


def test_help_documents_flags():
    out = _run("quantize", "--help").stdout
    for flag in ("--scheme", "--calib-size", "--iters", "--no-qprep", "--no-abc", "--measure", "--config", "--seed"):
        assert flag in out
    assert "train-desk" in _run("--help").stdout


def test_unknown_flag_is_a_validation_error():
    assert _run("quantize", "--bogus").returncode == 2


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iters": 7, "scheme": "W6A6"}))
    ns = cli.resolve(["quantize", "--config", str(cfg), "--iters", "5"])
    assert (ns.iters, ns.scheme, ns.calib_size) == (5, "W6A6", 1024)
    cfg.write_text(json.dumps({"colour": 1}))
    assert cli.main(["quantize", "--config", str(cfg)]) == cli.EXIT_VALIDATION


def test_exit_codes(tmp_path, setup):
    root, m, w, data = setup
    assert cli.main(["quantize", "--weights", w, "--data", data]) == cli.EXIT_VALIDATION
    assert cli.main(["fuse", "--manifest", str(tmp_path / "none.json"), "--weights", w]) == cli.EXIT_IO
    assert cli.main(["quantize", "--manifest", m, "--weights", w, "--data", data, "--scheme", "W9"]) == \
        cli.EXIT_VALIDATION
    assert cli.main(["eval", "--manifest", m, "--weights", w, "--data", str(tmp_path)]) == cli.EXIT_IO


def test_fuse_preserves_outputs(tmp_path, setup):
    root, m, w, data = setup
    assert cli.main(["fuse", "--manifest", m, "--weights", w, "--out", str(tmp_path)]) == 0
    fused = load_model(tmp_path / "fused.json", tmp_path / "fused.rapq")
    x = load_cifar10_dir(data, "test").images[:8]
    assert fused.fused
    assert np.abs(forward_fp(fused, x) - forward_fp(load_model(m, w), x)).max() <= 1e-4


def _quantize(out, m, w, data, *extra):
    return cli.main(["quantize", "--manifest", m, "--weights", w, "--data", data, "--out", str(out),
                     "--calib-size", "64", "--iters", "3", *extra])


def test_quantize_is_reproducible(tmp_path, setup):
    root, m, w, data = setup
    assert _quantize(tmp_path / "a", m, w, data, "--scheme", "W6A6") == 0
    assert _quantize(tmp_path / "b", m, w, data, "--scheme", "W6A6") == 0
    for name in ("report.json", "deploy.rapq", "quantized.rapq", "quantized.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(rep["blocks"]) == 6 and {"top1", "fp_top1"} <= set(rep["eval"])


def test_initialization_only_baseline(tmp_path, setup):
    root, m, w, data = setup
    assert _quantize(tmp_path, m, w, data, "--scheme", "W8A8", "--no-qprep", "--no-abc", "--iters", "0") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert all(b["iterations"] == 0 and b["stage_measurement"] is None for b in rep["blocks"])
    assert rep["config"]["qprep"] is False


def test_eval_32_bit_matches_fp(tmp_path, setup):
    root, m, w, data = setup
    assert _quantize(tmp_path / "q", m, w, data, "--scheme", "W32A32", "--first-last-bits", "0",
                     "--iters", "0") == 0
    assert cli.main(["eval", "--manifest", m, "--weights", w, "--data", data, "--out", str(tmp_path / "fp")]) == 0
    assert cli.main(["eval", "--manifest", str(tmp_path / "q/quantized.json"),
                     "--weights", str(tmp_path / "q/quantized.rapq"), "--data", data,
                     "--fp-manifest", m, "--fp-weights", w, "--out", str(tmp_path / "qe")]) == 0
    fp = json.loads((tmp_path / "fp/eval.json").read_text())
    q = json.loads((tmp_path / "qe/eval.json").read_text())
    assert q["top1"] == fp["top1"]
    assert len(q["per_block_mae"]) == 5


def test_analyze_outputs(tmp_path, setup):
    root, m, w, data = setup
    assert cli.main(["analyze", "--manifest", m, "--weights", w, "--data", data, "--out", str(tmp_path),
                     "--calib-size", "32", "--boxplot", "--clip-ratios", "0.01,0.05,0.2"]) == 0
    assert (tmp_path / "boxplot.csv").read_text().splitlines()[0] == "layer,q75,q90,q95,q99,max"
    assert len((tmp_path / "clip_sweep.csv").read_text().splitlines()) == 4
    assert cli.main(["analyze", "--manifest", m, "--weights", w, "--data", data, "--out", str(tmp_path),
                     "--clip-ratios", "a,b"]) == cli.EXIT_VALIDATION


def test_train_desk_smoke(tmp_path):
    rc = cli.main(["train-desk", "--data", str(tmp_path / "d"), "--synthetic", "--n-train", "512",
                   "--n-test", "64", "--epochs", "1", "--out", str(tmp_path / "m")])
    assert rc == 0
    rep = json.loads((tmp_path / "m/train_report.json").read_text())
    assert (tmp_path / "m/model.rapq").exists() and len(rep["loss_trace"]) == 1


def test_verify_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["verify", "--suite", "prop1", "--samples", "100000", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert len(doc["prop1"]) == len(analysis.PROP1_SWEEP)
    # a mixture whose clip strays from the scaled-Gaussian rule reports failure
    monkeypatch.setattr(analysis, "PROP2_SWEEP", [((1, 4, 8), 1)])
    assert cli.main(["verify", "--suite", "prop2", "--out", str(tmp_path)]) == cli.EXIT_FAILED
