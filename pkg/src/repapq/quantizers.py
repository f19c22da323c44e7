"""Quantization parameters and their initialization.

Weights use per-channel symmetric scales without offset; activations use a
per-tensor asymmetric quantizer whose range comes from moving-average batch
extremes, refined by a learnable multiplier ``eta`` and a zero-point
correction ``eps``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, fake_quant_act, fake_quant_weight


class DegenerateRangeError(ValueError):
    """Raised when a tensor has no spread to quantize."""


@dataclass
class WeightQuantParams:
    """Symmetric weight quantizer; ``scale`` has one entry per output channel
    (or a single entry for tensor-wise quantization)."""

    bits: int
    scale: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float32).reshape(-1)
        if np.any(self.scale <= 0):
            raise ValueError("weight scales must be positive")

    @property
    def per_channel(self) -> bool:
        return self.scale.size > 1

    def codes(self, w: np.ndarray) -> np.ndarray:
        s = self.scale.reshape((-1,) + (1,) * (w.ndim - 1)) if self.per_channel else self.scale[0]
        lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        return np.clip(np.rint(w.astype(np.float64) / s), lo, hi)

    def __call__(self, w, scale: Tensor | None = None) -> Tensor:
        return fake_quant_weight(w, self.scale if scale is None else scale, self.bits)


@dataclass
class ActQuantParams:
    """BatchQuant-style activation quantizer state."""

    bits: int
    x_min: float = 0.0
    x_max: float = 0.0
    eta: np.ndarray = field(default_factory=lambda: np.ones(1, np.float32))
    eps: np.ndarray = field(default_factory=lambda: np.zeros(1, np.float32))
    momentum: float = 0.9
    frozen: bool = False
    observed: int = 0

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float32).reshape(1)
        self.eps = np.asarray(self.eps, dtype=np.float32).reshape(1)

    def observe(self, batch: np.ndarray) -> None:
        """Fold one batch's extremes into the moving averages."""
        if self.frozen:
            raise RuntimeError("quantizer extremes are frozen")
        lo, hi = float(np.min(batch)), float(np.max(batch))
        if self.observed == 0:
            self.x_min, self.x_max = lo, hi
        else:
            m = self.momentum
            self.x_min = m * self.x_min + (1 - m) * lo
            self.x_max = m * self.x_max + (1 - m) * hi
        self.observed += 1

    def freeze(self) -> None:
        if not self.x_min < self.x_max:
            raise DegenerateRangeError(f"degenerate range [{self.x_min}, {self.x_max}]")
        self.frozen = True

    @property
    def scale(self) -> float:
        return (self.x_max - self.x_min) / (2 ** self.bits - 1) * float(self.eta[0])

    @property
    def zero_point(self) -> int:
        return int(np.rint(-self.x_min / self.scale - float(self.eps[0])))

    def codes(self, x: np.ndarray) -> np.ndarray:
        """Unsigned integer codes in [0, 2^b - 1] (as float64)."""
        s = self.scale
        return np.clip(np.rint(x.astype(np.float64) / s) + self.zero_point, 0, 2 ** self.bits - 1)

    def __call__(self, x, eta: Tensor | None = None, eps: Tensor | None = None) -> Tensor:
        if eta is None and eps is None:
            return fake_quant_act(x, self)
        return fake_quant_act(x, _Bound(self, eta, eps))


@dataclass
class _Bound:
    base: ActQuantParams
    eta: Tensor
    eps: Tensor

    def __getattr__(self, name):
        return getattr(self.base, name)


@dataclass
class ClipSearchConfig:
    """Lp-optimal clipping search over ``r * max|v|`` for ``r`` in ``{1/G, ..., 1}``."""

    p: int = 2
    grid: int = 200

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"distortion exponent must be 1 or 2, got {self.p}")
        if self.grid < 2:
            raise ValueError("grid must have at least 2 candidates")


def init_minmax(values, bits: int, symmetric: bool = True):
    """Scale from the value range: ``max|v|/(2^(b-1)-1)`` or ``(max-min)/(2^b-1)``.

    Asymmetric mode returns ``(scale, zero_point)``.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        raise DegenerateRangeError("degenerate range: tensor is constant")
    if symmetric:
        return max(abs(lo), abs(hi)) / (2 ** (bits - 1) - 1)
    s = (hi - lo) / (2 ** bits - 1)
    return s, int(np.rint(-lo / s))


def _sym_distortion(v: np.ndarray, clips: np.ndarray, bits: int, p: int) -> np.ndarray:
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    out = np.empty(len(clips))
    # chunk candidates so the (candidates x values) block stays ~16M elements
    step = max(1, int(16_000_000 // max(v.size, 1)))
    for start in range(0, len(clips), step):
        c = clips[start:start + step, None]
        s = c / hi
        err = np.abs(v[None, :] - np.clip(np.rint(v[None, :] / s), lo, hi) * s)
        out[start:start + step] = (err if p == 1 else err * err).sum(axis=1)
    return out


def clip_search(values, bits: int, p: int = 2, cfg: ClipSearchConfig | None = None) -> float:
    """Return the symmetric scale whose clip minimizes sum |v - Q(v)|^p.

    Ties go to the smaller clip.
    """
    cfg = cfg or ClipSearchConfig(p=p)
    if cfg.p != p:
        cfg = ClipSearchConfig(p=p, grid=cfg.grid)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.min() == v.max():
        raise DegenerateRangeError("degenerate range: tensor is constant")
    clips = np.arange(1, cfg.grid + 1) / cfg.grid * np.abs(v).max()
    d = _sym_distortion(v, clips, bits, p)
    best = int(np.argmin(d))  # argmin returns the first (smallest) minimizer
    return float(clips[best] / (2 ** (bits - 1) - 1))


def clip_search_per_channel(w: np.ndarray, bits: int, p: int = 2,
                            cfg: ClipSearchConfig | None = None) -> np.ndarray:
    flat = w.reshape(w.shape[0], -1)
    out = np.empty(w.shape[0], dtype=np.float32)
    for o in range(w.shape[0]):
        row = flat[o]
        if row.min() == row.max():
            # dead channel; any positive scale reproduces it
            out[o] = max(abs(float(row[0])), 1e-8) / (2 ** (bits - 1) - 1)
        else:
            out[o] = clip_search(row, bits, p, cfg)
    return out


def minmax_per_channel(w: np.ndarray, bits: int) -> np.ndarray:
    m = np.abs(w.reshape(w.shape[0], -1)).max(axis=1).astype(np.float64)
    return np.maximum(m, 1e-8).astype(np.float32) / (2 ** (bits - 1) - 1)


def calibrate_batchquant(layer: ActQuantParams, batches, momentum: float | None = None) -> ActQuantParams:
    """Accumulate EMA extremes over ``batches`` then freeze them."""
    batches = list(batches)
    if not batches:
        raise ValueError("calibrate_batchquant needs at least one batch")
    if momentum is not None:
        layer.momentum = momentum
    for b in batches:
        layer.observe(np.asarray(b))
    layer.freeze()
    return layer


_SCHEME = re.compile(r"^W(\d+)A(\d+)$", re.IGNORECASE)


def parse_scheme(scheme: str) -> tuple[int, int]:
    """``"W6A6"`` -> ``(6, 6)``."""
    m = _SCHEME.match(scheme.strip())
    if not m:
        raise ValueError(f"bad scheme {scheme!r}; expected e.g. W8A8")
    wb, ab = int(m.group(1)), int(m.group(2))
    for b in (wb, ab):
        if not 2 <= b <= 32:
            raise ValueError(f"bit-width {b} out of range [2, 32]")
    return wb, ab


def attach_quantizers(graph, scheme: str, first_last_bits: int | None = None,
                      init: str = "omse", p: int = 2, clip_cfg: ClipSearchConfig | None = None,
                      momentum: float = 0.9):
    """Attach weight/activation quantizers to every fused block and the head.

    Weight scales are initialized here (``init`` is ``"minmax"`` or ``"omse"``,
    the latter an Lp clip search with exponent ``p``).  The first block and the
    head use at least ``first_last_bits``.  Activation quantizers
    are created unfrozen; their extremes come from :func:`calibrate_batchquant`.
    """
    w_bits, a_bits = parse_scheme(scheme)
    blocks = [b for st in graph.stages for b in st.blocks]
    if any(b.fused is None for b in blocks):
        raise ValueError("attach_quantizers needs a fused graph")
    cfg = clip_cfg or ClipSearchConfig(p=p)
    for idx, block in enumerate(blocks):
        wb, ab = w_bits, a_bits
        if idx == 0 and first_last_bits:
            # the override only ever raises precision
            wb, ab = max(wb, first_last_bits), max(ab, first_last_bits)
        w = block.fused.weight
        s = minmax_per_channel(w, wb) if init == "minmax" else clip_search_per_channel(w, wb, p, cfg)
        block.w_quant = WeightQuantParams(wb, s)
        block.a_quant = ActQuantParams(ab, momentum=momentum)
    head = graph.head
    hb, hab = w_bits, a_bits
    if first_last_bits:
        hb, hab = max(hb, first_last_bits), max(hab, first_last_bits)
    if init == "minmax":
        hs = init_minmax(head.weight, hb, symmetric=True)
    else:
        hs = clip_search(head.weight, hb, p, cfg)
    head.w_quant = WeightQuantParams(hb, np.array([hs], np.float32))
    head.a_quant = ActQuantParams(hab, momentum=momentum)
    return graph
