"""Activation diagnostics and Monte-Carlo checks of the clipping theory.

The two propositions being checked:

* A 3x3 convolution of a two-component Gaussian mixture input (same mean,
  standard deviations ``sigma_x`` and ``t * sigma_x``) yields outputs whose
  component variance ratio is
  ``t^2 + mu_x^2 sigma_w^2 (1 - t^2) / (sigma_x^2 sigma_w^2 + sigma_x^2 mu_w^2 + mu_x^2 sigma_w^2)``,
  which is below ``t^2`` whenever ``mu_x != 0``.
* For an equal-weight mixture of zero-mean Gaussians with scales ``t_n``, the
  Lp-optimal clip is approximately ``k * h`` where ``h`` is the optimal clip of
  the unit Gaussian and ``k = (sum t_n^p / N)^(1/p)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .graph import ModelGraph, block_forward_fp, forward_fp, head_forward_fp
from .quantizers import ClipSearchConfig, clip_search

OUTLIER_FACTOR = 50.0
QUANTILES = (75, 90, 95, 99, 100)


# ---------------------------------------------------------------------------
# outliers
# ---------------------------------------------------------------------------

@dataclass
class OutlierReport:
    layers: list[int]
    sample_max: np.ndarray          # L x N
    sample_min: np.ndarray          # L x N
    channel_max: np.ndarray         # L x S x C  (C padded with nan to the widest layer)
    channel_min: np.ndarray
    selected_samples: list[int]
    outlier_fraction: np.ndarray    # L
    quantiles: np.ndarray           # L x len(QUANTILES), magnitudes of nonzero values

    def boxplot_rows(self) -> list[dict]:
        cols = ["q75", "q90", "q95", "q99", "max"]
        return [{"layer": l, **dict(zip(cols, map(float, q)))} for l, q in zip(self.layers, self.quantiles)]

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "selected_samples": self.selected_samples,
            "outlier_factor": OUTLIER_FACTOR,
            "outlier_fraction": self.outlier_fraction.tolist(),
            "quantile_levels": list(QUANTILES),
            "quantiles": self.quantiles.tolist(),
            "sample_max": self.sample_max.tolist(),
            "sample_min": self.sample_min.tolist(),
            "channel_max": np.where(np.isnan(self.channel_max), None, self.channel_max).tolist(),
            "channel_min": np.where(np.isnan(self.channel_min), None, self.channel_min).tolist(),
        }


def magnitude_quantiles(values: np.ndarray) -> np.ndarray:
    """75/90/95/99/100% quantiles of |v| over nonzero entries (zeros if all are zero)."""
    v = np.abs(np.asarray(values, np.float64).reshape(-1))
    v = v[v != 0]
    if v.size == 0:
        return np.zeros(len(QUANTILES))
    return np.percentile(v, QUANTILES)


def _block_activations(graph: ModelGraph, x: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
    chunks = [forward_fp(graph, x[i:i + batch_size], cache_intermediates=True)[1]["blocks"]
              for i in range(0, len(x), batch_size)]
    n_layers = sum(len(s) for s in chunks[0])
    flat = [[o for st in c for o in st] for c in chunks]
    return [np.concatenate([f[l] for f in flat]) for l in range(n_layers)]


def outlier_stats(graph: ModelGraph, dataset: Dataset, layer_ids=None,
                  selected_samples=(0, 1, 2)) -> OutlierReport:
    """Extremes, outlier mask fractions and magnitude quantiles of block outputs.

    ``layer_ids`` index blocks in topological order (default: all of them).
    """
    n_blocks = len(graph.blocks())
    layer_ids = list(range(n_blocks)) if layer_ids is None else list(layer_ids)
    for l in layer_ids:
        if not 0 <= l < n_blocks:
            raise IndexError(f"invalid layer id {l}; model has {n_blocks} blocks")
    sel = [s for s in selected_samples if s < len(dataset)]
    acts = _block_activations(graph, dataset.images)
    width = max(acts[l].shape[1] for l in layer_ids)
    L, N = len(layer_ids), len(dataset)
    smax, smin = np.empty((L, N)), np.empty((L, N))
    cmax = np.full((L, len(sel), width), np.nan)
    cmin = np.full((L, len(sel), width), np.nan)
    frac, quant = np.empty(L), np.empty((L, len(QUANTILES)))
    for i, l in enumerate(layer_ids):
        a = acts[l]
        flat = a.reshape(N, -1)
        smax[i], smin[i] = flat.max(axis=1), flat.min(axis=1)
        c = a.shape[1]
        per_ch = a[sel].reshape(len(sel), c, -1)
        cmax[i, :, :c], cmin[i, :, :c] = per_ch.max(axis=2), per_ch.min(axis=2)
        mag = np.abs(a)
        frac[i] = float((mag >= OUTLIER_FACTOR * mag.mean()).mean()) if mag.mean() > 0 else 0.0
        quant[i] = magnitude_quantiles(a)
    return OutlierReport(layer_ids, smax, smin, cmax, cmin, sel, frac, quant)


# ---------------------------------------------------------------------------
# clip sweep
# ---------------------------------------------------------------------------

def clip_thresholds(graph: ModelGraph, calib: Dataset, ratio: float) -> list[float]:
    """Per-block-input magnitude threshold clipping a fraction ``ratio`` of nonzero values."""
    inputs = [calib.images] + _block_activations(graph, calib.images)[:-1]
    out = []
    for a in inputs:
        v = np.abs(a.reshape(-1))
        v = v[v != 0]
        out.append(float(np.quantile(v, 1.0 - ratio)) if v.size else 0.0)
    return out


def clip_sweep(graph: ModelGraph, dataset: Dataset, ratios, calib: Dataset | None = None,
               batch_size: int = 256) -> list[dict]:
    """Top-1 accuracy when every block input is clipped to ``[-c, c]``.

    ``c`` is the ``(1 - ratio)`` quantile of nonzero magnitudes at that input,
    measured on ``calib`` (default: ``dataset``).
    """
    ratios = list(ratios)
    if not ratios:
        raise ValueError("clip_sweep needs at least one ratio")
    if any(not 0 <= r <= 1 for r in ratios):
        raise ValueError("clip ratios must lie in [0, 1]")
    calib = calib or dataset
    blocks = [b for _, _, b in graph.blocks()]
    rows = []
    for r in ratios:
        th = clip_thresholds(graph, calib, r)
        correct = 0
        for i in range(0, len(dataset), batch_size):
            h = dataset.images[i:i + batch_size]
            for b, c in zip(blocks, th):
                h = block_forward_fp(b, np.clip(h, -c, c))
            logits = head_forward_fp(graph.head, h)
            correct += int((logits.argmax(1) == dataset.labels[i:i + batch_size]).sum())
        rows.append({"ratio": float(r), "top1": correct / len(dataset)})
    return rows


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

def code_entropy(codes, bits: int) -> float:
    """Shannon entropy (bits) of the histogram of integer codes in ``[0, 2^bits - 1]``."""
    c = np.asarray(codes).reshape(-1).astype(np.int64)
    if c.size == 0:
        return 0.0
    if c.min() < 0 or c.max() > 2 ** bits - 1:
        raise ValueError(f"codes outside [0, {2 ** bits - 1}]")
    counts = np.bincount(c, minlength=2 ** bits)
    p = counts[counts > 0] / c.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def symmetric_codes(values, scale: float, bits: int) -> np.ndarray:
    """Unsigned view (offset ``2^(b-1)``) of symmetric quantization codes."""
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    q = np.clip(np.rint(np.asarray(values, np.float64) / scale), lo, hi)
    return (q - lo).astype(np.int64)


def entropy_trial(seed: int, t: float, bits: int = 8, samples: int = 20000, grid: int = 200) -> dict:
    """Entropy of codes under the MAE- and MSE-optimal clips for ``N(0,1)/N(0,t^2)``."""
    rng = np.random.default_rng(seed)
    v = sample_mixture(rng, (1.0, t), samples)
    out = {"seed": seed, "t": t}
    for p in (1, 2):
        s = clip_search(v, bits, p, ClipSearchConfig(p=p, grid=grid))
        out[f"clip_p{p}"] = s * (2 ** (bits - 1) - 1)
        out[f"entropy_p{p}"] = code_entropy(symmetric_codes(v, s, bits), bits)
    return out


# ---------------------------------------------------------------------------
# propositions
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    """Two-component input mixture (std ``sigma_x`` and ``t*sigma_x``) and weight law."""

    t: float = 3.0
    mu_x: float = 1.0
    sigma_x: float = 1.0
    mu_w: float = 0.0
    sigma_w: float = 1.0
    alpha: tuple = (0.5, 0.5)
    channels: int = 4

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_w <= 0:
            raise ValueError("degenerate mixture: sigma must be > 0")
        if self.t < 1:
            raise ValueError("scale factor t must be >= 1")
        if not math.isclose(sum(self.alpha), 1.0, abs_tol=1e-9):
            raise ValueError("component weights must sum to 1")


@dataclass
class PropResult:
    predicted: float
    empirical: float
    stderr: float
    samples: int
    passed: bool
    tolerance: str = "3sigma"
    details: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.empirical - self.predicted


def predicted_variance_ratio(spec: MixtureSpec) -> float:
    t2 = spec.t ** 2
    den = (spec.sigma_x ** 2 * spec.sigma_w ** 2 + spec.sigma_x ** 2 * spec.mu_w ** 2
           + spec.mu_x ** 2 * spec.sigma_w ** 2)
    return t2 + spec.mu_x ** 2 * spec.sigma_w ** 2 * (1 - t2) / den


def _var_and_se(y: np.ndarray) -> tuple[float, float]:
    d = y - y.mean()
    m2 = float(np.mean(d * d))
    m4 = float(np.mean(d ** 4))
    return m2, math.sqrt(max(m4 - m2 * m2, 0.0) / len(y))


def _conv_outputs(rng, spec: MixtureSpec, scale: float, n: int, chunk: int = 50_000) -> np.ndarray:
    """One 3x3 conv output per sample; inputs and weights drawn fresh per sample."""
    k = spec.channels * 9
    out = np.empty(n)
    for i in range(0, n, chunk):
        m = min(chunk, n - i)
        x = rng.normal(spec.mu_x, scale * spec.sigma_x, (m, k))
        w = rng.normal(spec.mu_w, spec.sigma_w, (m, k))
        out[i:i + m] = np.einsum("nk,nk->n", x, w)
    return out


def verify_prop1(spec: MixtureSpec, samples: int = 200_000, seed: int = 0) -> PropResult:
    """Monte-Carlo check of the component output-variance ratio at 3 sigma."""
    if samples < 100_000:
        raise ValueError("verify_prop1 needs at least 1e5 samples")
    rng = np.random.default_rng(seed)
    labels = rng.random(samples) < spec.alpha[1]   # True -> wide component
    n_wide = int(labels.sum())
    y1 = _conv_outputs(rng, spec, 1.0, samples - n_wide)
    y2 = _conv_outputs(rng, spec, spec.t, n_wide)
    v1, se1 = _var_and_se(y1)
    v2, se2 = _var_and_se(y2)
    ratio = v2 / v1
    se = ratio * math.sqrt((se1 / v1) ** 2 + (se2 / v2) ** 2)
    pred = predicted_variance_ratio(spec)
    ok = abs(ratio - pred) <= 3 * se
    if spec.mu_x != 0 and spec.t > 1:
        ok = ok and pred < spec.t ** 2
    return PropResult(pred, ratio, se, samples, bool(ok), "3sigma",
                      {"t": spec.t, "mu_x": spec.mu_x, "sigma_w": spec.sigma_w, "t_squared": spec.t ** 2})


def sample_mixture(rng, t_list, n: int) -> np.ndarray:
    """Equal-weight mixture of ``N(0, t_n^2)``."""
    t = np.asarray(t_list, np.float64)
    return rng.standard_normal(n) * t[rng.integers(0, len(t), n)]


def optimal_clip(values, bits: int, p: int, grid: int = 200) -> float:
    return clip_search(values, bits, p, ClipSearchConfig(p=p, grid=grid)) * (2 ** (bits - 1) - 1)


def prop2_factor(t_list, p: int) -> float:
    t = np.asarray(t_list, np.float64)
    return float(np.mean(t ** p) ** (1.0 / p))


def verify_prop2(t_list, p: int, bits: int = 8, samples: int = 1_000_000, seed: int = 0,
                 grid: int = 200, rel_tol: float = 0.05) -> PropResult:
    """Compare the grid-searched mixture clip with ``k * h``; reports the raw gap."""
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if samples < 1_000_000:
        raise ValueError("verify_prop2 needs at least 1e6 samples")
    if min(t_list) < 1:
        raise ValueError("scale factors must be >= 1")
    rng = np.random.default_rng(seed)
    h = optimal_clip(rng.standard_normal(samples), bits, p, grid)
    mix = optimal_clip(sample_mixture(rng, t_list, samples), bits, p, grid)
    k = prop2_factor(t_list, p)
    pred = k * h
    rel = abs(mix - pred) / pred
    return PropResult(pred, mix, 0.0, samples, bool(rel <= rel_tol), f"{rel_tol:.0%} relative",
                      {"t_list": list(map(float, t_list)), "p": p, "bits": bits, "h": h, "k": k,
                       "relative_gap": rel, "empirical_k": mix / h})


PROP1_SWEEP = [dict(t=t, mu_x=m, sigma_w=s) for t in (2, 4, 8) for m in (0.5, 1, 2) for s in (0.5, 1)]
PROP2_SWEEP = [(t, p) for t in ((1, 2), (1, 3), (1, 4, 8)) for p in (1, 2)]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, PropResult):
        return _plain({**asdict(obj), "gap": obj.gap})
    if isinstance(obj, OutlierReport):
        return _plain(obj.to_dict())
    return obj


def export_report(report, path, fmt: str | None = None, columns=None) -> Path:
    """Write ``report`` as JSON, or a list of flat row dicts as CSV.

    CSV columns follow ``columns`` (default: keys of the first row, in order);
    an empty row list with explicit ``columns`` gives a header-only file.
    """
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    if isinstance(report, OutlierReport) and fmt == "csv":
        report, columns = report.boxplot_rows(), ["layer", "q75", "q90", "q95", "q99", "max"]
    if fmt == "json":
        path.write_text(json.dumps(_plain(report), indent=2, sort_keys=True) + "\n")
        return path
    rows = _plain(list(report))
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


__all__ = [
    "OutlierReport", "MixtureSpec", "PropResult", "outlier_stats", "magnitude_quantiles",
    "clip_thresholds", "clip_sweep", "code_entropy", "symmetric_codes", "entropy_trial",
    "predicted_variance_ratio", "verify_prop1", "verify_prop2", "prop2_factor", "optimal_clip",
    "sample_mixture", "export_report", "PROP1_SWEEP", "PROP2_SWEEP",
]
