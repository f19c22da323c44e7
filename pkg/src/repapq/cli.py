"""Command-line entry point.

Every command accepts ``--config FILE`` (a JSON object whose keys are flag
names with dashes replaced by underscores).  Values given on the command line
override the file, which overrides the built-in defaults.

Exit codes: 0 success, 1 verification failure, 2 validation error,
3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .calibration import CalibConfig, default_lrs, evaluate, quantize_pipeline
from .data import DatasetError, load_cifar10_dir, make_synthetic_cifar, sample_calibration
from .fusion import FusionError, deploy_model, fuse_graph
from .graph import (ManifestError, WeightsError, build_reference_graph, load_model, save_model)
from .quantizers import DegenerateRangeError, parse_scheme
from .training import DivergenceError, TrainConfig, accuracy, train_desk

log = logging.getLogger("repapq")

EXIT_OK, EXIT_FAILED, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4

# default outlier sites for the desk model: (stage, block, channel, gain)
DEFAULT_PLANT_SITES = [(3, 1, 5, 30.0), (3, 3, 11, 40.0)]

DEFAULTS = {
    "seed": 42,
    "out": "out",
    "scheme": "W8A8",
    "calib_size": 1024,
    "iters": 1000,
    "batch_size": None,
    "no_qprep": False,
    "no_abc": False,
    "measure": "mae",
    "p": 2,
    "init": "omse",
    "first_last_bits": 8,
    "epochs": 8,
    "lr": 2e-3,
    "plant_outliers": False,
    "synthetic": False,
    "n_train": 10000,
    "n_test": 2000,
    "boxplot": False,
    "clip_ratios": None,
    "samples": None,
    "suite": "all",
    "verbose": False,
}


class ValidationError(ValueError):
    pass


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON config ({e})") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return doc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="model manifest (JSON)")
    p.add_argument("--weights", help="model weights file")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory with CIFAR-10 binary batches")


def _calib_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", help="bit-widths, e.g. W8A8 or W6A6 (default W8A8)")
    p.add_argument("--calib-size", type=int, help="calibration samples (default 1024)")
    p.add_argument("--iters", type=int, help="Adam iterations per block (default 1000)")
    p.add_argument("--batch-size", type=int, help="calibration batch size (default 32)")
    p.add_argument("--no-qprep", action="store_true", default=None, help="disable the channel affine")
    p.add_argument("--no-abc", action="store_true", default=None, help="disable the stage-output term")
    p.add_argument("--measure", choices=["mae", "mse"],
                   help="mae: MAE except MSE for the last block of each stage; mse: MSE everywhere")
    p.add_argument("--p", type=int, choices=[1, 2], help="weight clip-search exponent (default 2)")
    p.add_argument("--init", choices=["omse", "minmax"], help="weight scale initialization (default omse)")
    p.add_argument("--first-last-bits", type=int,
                   help="minimum bit-width of the first block and the head (default 8, 0 disables)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repapq", description="Post-training quantization of reparameterized CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("--seed", type=int, help="random seed (default 42)")
        p.add_argument("--out", help="output directory (default ./out)")
        p.add_argument("-v", "--verbose", action="store_true", default=None, help="log progress")

    p = sub.add_parser("train-desk", help="train the multi-branch reference model")
    common(p)
    _data_args(p)
    p.add_argument("--synthetic", action="store_true", default=None,
                   help="write procedurally generated CIFAR-format data to --data if it is missing")
    p.add_argument("--n-train", type=int, help="synthetic training samples (default 10000)")
    p.add_argument("--n-test", type=int, help="synthetic test samples (default 2000)")
    p.add_argument("--epochs", type=int, help="training epochs (default 8)")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 2e-3)")
    p.add_argument("--batch-size", type=int, help="training batch size (default 64)")
    p.add_argument("--plant-outliers", action="store_true", default=None,
                   help="plant channel outliers three epochs before the end")

    p = sub.add_parser("fuse", help="fuse branches and BatchNorms into single convolutions")
    common(p)
    _model_args(p)
    p.add_argument("--no-qprep", action="store_true", default=None, help="do not insert the channel affine")

    p = sub.add_parser("quantize", help="calibrate a quantized model and export it for deployment")
    common(p)
    _model_args(p)
    _data_args(p)
    _calib_args(p)

    p = sub.add_parser("eval", help="top-1 accuracy and per-block distortion")
    common(p)
    _model_args(p)
    _data_args(p)
    p.add_argument("--fp-manifest", help="full-precision reference manifest")
    p.add_argument("--fp-weights", help="full-precision reference weights")

    p = sub.add_parser("analyze", help="activation outlier statistics and clip sweeps")
    common(p)
    _model_args(p)
    _data_args(p)
    p.add_argument("--calib-size", type=int, help="samples analyzed (default 1024)")
    p.add_argument("--boxplot", action="store_true", default=None, help="write boxplot.csv")
    p.add_argument("--clip-ratios", help="comma-separated clip ratios, e.g. 0.01,0.05,0.2")

    p = sub.add_parser("verify", help="Monte-Carlo checks of the clipping propositions")
    common(p)
    p.add_argument("--suite", choices=["all", "prop1", "prop2", "entropy"], help="which checks (default all)")
    p.add_argument("--samples", type=int, help="Monte-Carlo samples per check")
    return parser


def resolve(argv=None) -> argparse.Namespace:
    """Parse ``argv`` and merge with the config file and defaults."""
    ns = build_parser().parse_args(argv)
    given = {k: v for k, v in vars(ns).items() if v is not None}
    merged = dict(DEFAULTS)
    if "config" in given:
        doc = _read_json(given["config"])
        unknown = set(doc) - set(DEFAULTS) - {"manifest", "weights", "data", "fp_manifest", "fp_weights"}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        merged.update(doc)
    merged.update(given)
    for k in ("manifest", "weights", "data", "fp_manifest", "fp_weights", "config"):
        merged.setdefault(k, None)
    return argparse.Namespace(**merged)


def _need(cfg, *names) -> None:
    for n in names:
        v = getattr(cfg, n)
        if v is None:
            raise ValidationError(f"--{n.replace('_', '-')} is required for {cfg.command}")
        if n != "data" and not Path(v).exists():
            raise FileNotFoundError(f"{v} does not exist")


def _calib_config(cfg) -> CalibConfig:
    m = cfg.measure
    kw = dict(iterations=cfg.iters, lrs=default_lrs(cfg.scheme), calib_size=cfg.calib_size, qprep=not cfg.no_qprep,
              abc=not cfg.no_abc, seed=cfg.seed, block_measure=m, stage_measure=m,
              last_block_measure="mse")
    if cfg.batch_size:
        kw["batch_size"] = cfg.batch_size
    return CalibConfig(**kw)


def cmd_train_desk(cfg) -> int:
    _need(cfg, "data")
    data_dir = Path(cfg.data)
    if cfg.synthetic and not (data_dir / "test_batch.bin").exists():
        make_synthetic_cifar(data_dir, cfg.n_train, cfg.n_test, seed=cfg.seed)
    train, test = load_cifar10_dir(data_dir, "train"), load_cifar10_dir(data_dir, "test")
    train.check_labels(10)
    graph = build_reference_graph(seed=cfg.seed)
    tc = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed,
                     batch_size=cfg.batch_size or TrainConfig.batch_size)
    if cfg.plant_outliers:
        tc.plant_at = max(cfg.epochs - 3, 0)
        tc.plant_sites = list(DEFAULT_PLANT_SITES)
    rep = train_desk(graph, train, tc)
    out = Path(cfg.out)
    save_model(graph, out, "model")
    rep.update({"test_top1": accuracy(graph, test), "seed": cfg.seed,
                "plant_sites": [list(s) for s in tc.plant_sites]})
    _write_json(out / "train_report.json", rep)
    print(json.dumps({"test_top1": rep["test_top1"], "final_loss": rep["loss_trace"][-1]}))
    return EXIT_OK


def cmd_fuse(cfg) -> int:
    _need(cfg, "manifest", "weights")
    g = fuse_graph(load_model(cfg.manifest, cfg.weights), qprep=not cfg.no_qprep)
    m, w = save_model(g, cfg.out, "fused")
    print(json.dumps({"manifest": str(m), "weights": str(w)}))
    return EXIT_OK


def cmd_quantize(cfg) -> int:
    _need(cfg, "manifest", "weights", "data")
    parse_scheme(cfg.scheme)
    fp = load_model(cfg.manifest, cfg.weights)
    train = load_cifar10_dir(cfg.data, "train")
    calib = sample_calibration(train, cfg.calib_size, cfg.seed)
    cc = _calib_config(cfg)
    q, report = quantize_pipeline(fp, calib, cc, scheme=cfg.scheme, init=cfg.init, p=cfg.p,
                                  first_last_bits=cfg.first_last_bits or None)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(q, out, "quantized")
    deploy = deploy_model(q)
    deploy.save(out / "deploy.rapq")
    try:
        test = load_cifar10_dir(cfg.data, "test")
        report["eval"] = {"top1": evaluate(q, test)["top1"], "fp_top1": accuracy(fp, test)}
    except FileNotFoundError:
        report["eval"] = None
    _write_json(out / "report.json", report)
    print(json.dumps({"report": str(out / "report.json"), "eval": report["eval"]}))
    return EXIT_OK


def cmd_eval(cfg) -> int:
    _need(cfg, "manifest", "weights", "data")
    g = load_model(cfg.manifest, cfg.weights)
    fp = None
    if cfg.fp_manifest or cfg.fp_weights:
        _need(cfg, "fp_manifest", "fp_weights")
        fp = load_model(cfg.fp_manifest, cfg.fp_weights)
    test = load_cifar10_dir(cfg.data, "test")
    res = evaluate(g, test, fp)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", res)
    print(json.dumps({"top1": res["top1"]}))
    return EXIT_OK


def cmd_analyze(cfg) -> int:
    _need(cfg, "manifest", "weights", "data")
    g = load_model(cfg.manifest, cfg.weights)
    train = load_cifar10_dir(cfg.data, "train")
    calib = sample_calibration(train, cfg.calib_size, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = analysis.outlier_stats(g, calib)
    analysis.export_report(rep, out / "outliers.json")
    written = ["outliers.json"]
    if cfg.boxplot:
        analysis.export_report(rep, out / "boxplot.csv")
        written.append("boxplot.csv")
    if cfg.clip_ratios:
        try:
            ratios = [float(r) for r in str(cfg.clip_ratios).split(",")]
        except ValueError as e:
            raise ValidationError(f"bad --clip-ratios {cfg.clip_ratios!r}") from e
        test = load_cifar10_dir(cfg.data, "test")
        rows = analysis.clip_sweep(g, test, ratios, calib=calib)
        analysis.export_report(rows, out / "clip_sweep.csv", columns=["ratio", "top1"])
        written.append("clip_sweep.csv")
    print(json.dumps({"written": written, "outlier_fraction": rep.outlier_fraction.tolist()}))
    return EXIT_OK


def run_verify(suite: str = "all", samples: int | None = None, seed: int = 42) -> dict:
    """Run the proposition and entropy checks; returns a JSON-ready result dict."""
    res = {}
    if suite in ("all", "prop1"):
        n = samples or 200_000
        res["prop1"] = [analysis.verify_prop1(analysis.MixtureSpec(**kw), n, seed=seed + i)
                        for i, kw in enumerate(analysis.PROP1_SWEEP)]
    if suite in ("all", "prop2"):
        n = samples or 1_000_000
        res["prop2"] = [analysis.verify_prop2(t, p, samples=n, seed=seed + i)
                        for i, (t, p) in enumerate(analysis.PROP2_SWEEP)]
    if suite in ("all", "entropy"):
        trials = [analysis.entropy_trial(seed + i, 4.0 + 6.0 * ((i * 0.6180339887) % 1.0))
                  for i in range(100)]
        wins = sum(t["entropy_p1"] > t["entropy_p2"] for t in trials)
        res["entropy"] = {"trials": trials, "wins": wins, "passed": wins >= 95}
    return res


def _failures(res: dict) -> list[str]:
    fails = []
    for name in ("prop1", "prop2"):
        for r in res.get(name, []):
            if not r.passed:
                fails.append(f"{name}:{json.dumps(r.details, sort_keys=True)}")
    if "entropy" in res and not res["entropy"]["passed"]:
        fails.append(f"entropy:wins={res['entropy']['wins']}/100")
    return fails


def cmd_verify(cfg) -> int:
    res = run_verify(cfg.suite, cfg.samples, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.export_report(res, out / "verify.json")
    fails = _failures(res)
    print(json.dumps({"passed": not fails, "failures": fails}, indent=2))
    return EXIT_OK if not fails else EXIT_FAILED


COMMANDS = {
    "train-desk": cmd_train_desk,
    "fuse": cmd_fuse,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[cfg.command](cfg)
    except (DivergenceError, FloatingPointError) as e:
        print(f"error [{cfg.command}]: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"error [{cfg.command}]: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ManifestError, WeightsError, DatasetError, FusionError,
            DegenerateRangeError, ValueError) as e:
        print(f"error [{cfg.command}]: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
