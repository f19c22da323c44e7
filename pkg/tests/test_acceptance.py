"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The desk model is trained once per session from procedurally generated
CIFAR-format data (10000 train / 5000 test images, 8 epochs, outliers planted
in two mid-network blocks three epochs before the end).  Every later criterion
that needs a model uses it.
"""
import itertools
import json
import logging
import re
import time

import numpy as np
import pytest

import test_autodiff as tad
import test_calibration as tcal
from repapq import analysis, cli
from repapq.calibration import CalibConfig, forward_quant, quantize_pipeline
from repapq.data import load_cifar10_dir, sample_calibration
from repapq.fusion import deploy_model, fuse_block
from repapq.graph import block_forward_fp, load_model, make_block

pytestmark = pytest.mark.slow

PLANTED_LAYERS = (8, 10)   # topological indices of blocks (3, 1) and (3, 3)


def _record(record_property, num, name, ok, detail):
    record_property("criterion", num)
    record_property("detail", f"{name}: {detail}")
    print(f"criterion {num} {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    rc = cli.main(["train-desk", "--data", str(root / "data"), "--synthetic", "--n-train", "10000",
                   "--n-test", "5000", "--epochs", "8", "--plant-outliers", "--seed", "42",
                   "--out", str(root / "fp")])
    assert rc == 0
    return {"root": root, "manifest": str(root / "fp/model.json"), "weights": str(root / "fp/model.rapq"),
            "data": str(root / "data"), "train_seconds": time.time() - t0, "runs": {}}


def _quantize(desk, name, *flags):
    if name not in desk["runs"]:
        out = desk["root"] / name
        t0 = time.time()
        rc = cli.main(["quantize", "--manifest", desk["manifest"], "--weights", desk["weights"],
                       "--data", desk["data"], "--out", str(out), "--seed", "42", *flags])
        assert rc == 0
        rep = json.loads((out / "report.json").read_text())
        desk["runs"][name] = {"out": out, "report": rep, "seconds": time.time() - t0}
    return desk["runs"][name]


ABLATION = [
    ("minmax", ["--scheme", "W6A6", "--init", "minmax", "--iters", "0", "--no-qprep", "--no-abc"]),
    ("adaquant_mae", ["--scheme", "W6A6", "--no-qprep", "--no-abc"]),
    ("qprep", ["--scheme", "W6A6", "--no-abc"]),
    ("qprep_abc", ["--scheme", "W6A6"]),
]


def test_criterion_1_fusion_equivalence(record_property):
    t0 = time.time()
    combos = [c for r in (1, 2, 3) for c in itertools.combinations(("conv3x3", "conv1x1", "identity"), r)]
    rng = np.random.default_rng(2024)
    cases = list(itertools.islice(itertools.cycle(itertools.product(combos, ("pre-add", "post-add"))), 200))
    worst = 0.0
    for branches, norm in cases:
        c = int(rng.integers(1, 9))
        stride = 1 if "identity" in branches else int(rng.choice([1, 2]))
        cout = c if "identity" in branches else int(rng.integers(1, 9))
        blk = make_block(c, cout, stride, branches, norm, rng, random_bn=True)
        x = rng.normal(size=(8, c, 9, 9)).astype(np.float32)
        ref = block_forward_fp(blk, x)
        fuse_block(blk, qprep=True)
        worst = max(worst, float(np.abs(block_forward_fp(blk, x) - ref).max()))
    dt = time.time() - t0
    _record(record_property, 1, "fusion equivalence", worst <= 1e-4 and dt < 60,
            f"{len(cases)} blocks, max|diff|={worst:.2e} (<=1e-4), {dt:.1f}s")


def test_criterion_2_deploy_fold_exactness(record_property, desk):
    x = load_cifar10_dir(desk["data"], "test").images[:32]
    models = {name: _quantize(desk, name, *flags)["out"] for name, flags in (("w8a8", ["--scheme", "W8A8"]),
                                                                            ABLATION[-1])}
    t0 = time.time()
    gaps = {}
    for name, out in models.items():
        q = load_model(out / "quantized.json", out / "quantized.rapq")
        gaps[name] = float(np.abs(deploy_model(q).forward(x) - forward_quant(q, x)).max())
    dt = time.time() - t0
    _record(record_property, 2, "deploy-fold exactness", max(gaps.values()) <= 1e-4 and dt < 60,
            ", ".join(f"{k} max|diff|={v:.2e}" for k, v in gaps.items()) + f" (<=1e-4, 32 inputs), {dt:.1f}s")


def test_criterion_3_variance_ratio(record_property):
    t0 = time.time()
    res = cli.run_verify("prop1", samples=200_000, seed=42)["prop1"]
    bad = [r.details for r in res if not r.passed]
    below = all(r.predicted < r.details["t_squared"] for r in res if r.details["mu_x"] != 0)
    dt = time.time() - t0
    _record(record_property, 3, "variance-ratio proposition", not bad and below and dt < 300,
            f"{len(res) - len(bad)}/{len(res)} within 3 sigma, ratio < t^2 for mu_x != 0: {below}, {dt:.0f}s")


def test_criterion_4_mixture_clip(record_property):
    t0 = time.time()
    res = cli.run_verify("prop2", seed=42)["prop2"]
    dt = time.time() - t0
    gaps = ", ".join(f"t={tuple(int(t) for t in r.details['t_list'])} p={r.details['p']}: "
                     f"{r.details['relative_gap']:.1%}" for r in res)
    _record(record_property, 4, "mixture clip scaling", all(r.passed for r in res) and dt < 600,
            f"relative gaps {gaps} (<=5%), {dt:.0f}s")


GRADIENT_CHECKS = (
    [(tad.test_conv_gradients, p) for p in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)]]
    + [(tad.test_op_gradients, (n,)) for n in ["relu", "add", "scale", "sum_all", "gap", "linear", "softmax", "bn"]]
    + [(tad.test_channel_affine_gain_gradient_under_mae, ())]
    + [(tad.test_fq_weight_gradient_matches_surrogate, (pc,)) for pc in (True, False)]
    + [(tad.test_fq_act_gradient_matches_surrogate, p) for p in [(1.0, 0.0), (0.8, 0.3), (1.2, -0.2)]]
    + [(tcal.test_abc_stage_gradient_matches_finite_differences, ())]
)


def test_criterion_5_gradient_correctness(record_property):
    t0 = time.time()
    failed = []
    for fn, args in GRADIENT_CHECKS:
        try:
            fn(*args)
        except AssertionError as e:
            failed.append(f"{fn.__name__}{args}: {e}")
    dt = time.time() - t0
    _record(record_property, 5, "gradient correctness", not failed and dt < 120,
            f"{len(GRADIENT_CHECKS) - len(failed)}/{len(GRADIENT_CHECKS)} finite-difference checks "
            f"(rel. err <= 1e-3, incl. 3-block stage term), {dt:.1f}s" + (f"; {failed}" if failed else ""))


def test_criterion_6_ablation_direction(record_property, desk):
    fp = load_model(desk["manifest"], desk["weights"])
    outl = analysis.outlier_stats(fp, sample_calibration(load_cifar10_dir(desk["data"]), 256, 0),
                                  layer_ids=PLANTED_LAYERS)
    top1 = {name: _quantize(desk, name, *flags)["report"]["eval"]["top1"] for name, flags in ABLATION}
    w8 = _quantize(desk, "w8a8", "--scheme", "W8A8")["report"]["eval"]
    seconds = desk["train_seconds"] + sum(r["seconds"] for r in desk["runs"].values())
    seq = [top1[n] for n, _ in ABLATION]
    steps = np.diff(seq)
    ordered = bool((steps >= 0).all())
    total = seq[-1] - seq[0]
    w8_gap = w8["fp_top1"] - w8["top1"]
    genuine = bool((outl.outlier_fraction > 0).all())
    ok = ordered and total >= 0.01 and abs(w8_gap) <= 0.01 and genuine and seconds < 3600
    _record(record_property, 6, "ablation direction", ok,
            "W6A6 " + " <= ".join(f"{n}={top1[n]:.4f}" for n, _ in ABLATION)
            + f", steps={[round(float(s), 4) for s in steps]}, total={total:+.4f} (>=0.01); "
            f"W8A8={w8['top1']:.4f} vs FP={w8['fp_top1']:.4f}; planted-layer outlier fraction="
            f"{[round(float(f), 5) for f in outl.outlier_fraction]}; {seconds / 60:.1f} min")


def test_criterion_7_entropy(record_property):
    t0 = time.time()
    res = cli.run_verify("entropy", seed=42)["entropy"]
    dt = time.time() - t0
    ts = [t["t"] for t in res["trials"]]
    _record(record_property, 7, "MAE-vs-MSE code entropy", res["wins"] >= 95 and min(ts) >= 4 and dt < 120,
            f"p=1 entropy > p=2 entropy in {res['wins']}/100 trials (t in [{min(ts):.1f}, {max(ts):.1f}]), {dt:.0f}s")


def test_criterion_8_measurement_rule(record_property, desk, caplog):
    fp = load_model(desk["manifest"], desk["weights"])
    calib = sample_calibration(load_cifar10_dir(desk["data"]), 64, 42)
    with caplog.at_level(logging.INFO, logger="repapq.calibration"):
        quantize_pipeline(fp, calib, CalibConfig(iterations=1, calib_size=64, eval_every=1), scheme="W6A6")
    pat = re.compile(r"calibrate stage=(\d+) block=(\d+) measurement=(\w+)")
    seen = [m for m in (pat.search(r.getMessage()) for r in caplog.records) if m]
    lengths = [len(s.blocks) for s in fp.stages]
    wrong = [m.group(0) for m in seen
             if m[3] != ("mse" if int(m[2]) == lengths[int(m[1])] - 1 else "mae")]
    n_mse = sum(m[3] == "mse" for m in seen)
    ok = len(seen) == sum(lengths) and not wrong
    _record(record_property, 8, "measurement rule", ok,
            f"{len(seen)} block log lines, {n_mse} MSE (last-in-stage incl. single-block stages), "
            f"{len(seen) - n_mse} MAE" + (f"; wrong: {wrong}" if wrong else ""))


def test_criterion_9_reproducibility(record_property, desk):
    outs = []
    for tag in ("a", "b"):
        out = desk["root"] / f"repro_{tag}"
        assert cli.main(["quantize", "--manifest", desk["manifest"], "--weights", desk["weights"],
                         "--data", desk["data"], "--out", str(out), "--scheme", "W6A6", "--seed", "7",
                         "--calib-size", "256", "--iters", "50"]) == 0
        outs.append(out)
    same = {n: (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in ("report.json", "deploy.rapq")}
    _record(record_property, 9, "reproducibility", all(same.values()),
            f"two identical quantize runs: report identical={same['report.json']}, "
            f"deploy weights identical={same['deploy.rapq']}")
