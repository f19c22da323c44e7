"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Only the fixed operation set needed by the quantization pipeline is provided:
convolution (im2col), ReLU, addition, channel-wise affine, weight and
activation fake quantizers with straight-through gradients, MAE/MSE losses,
global average pooling, linear, softmax cross-entropy and training-mode batch
normalization.  Adam with cosine decay lives at the bottom of the module.

Arrays are float32 unless a float64 array is passed explicitly, in which case
the dtype is preserved (used for tight finite-difference checks).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """A dense array of reals plus the autodiff record that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = _as_array(data, dtype)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds 4")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> dict:
        return backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Build an op output; the tape is recorded only if some input needs grad."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict:
    """Run reverse-mode differentiation from a scalar ``loss``.

    Gradients are summed into ``.grad`` of every tensor that requires grad and
    the mapping ``{tensor: grad}`` for leaves is returned.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Unfold a padded NCHW array into (N*oh*ow, C*k*k) patch rows."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, oh, ow, c, k, k), (s0, s2 * stride, s3 * stride, s1, s2, s3),
                      writeable=False)
    return view.reshape(n * oh * ow, c * k * k)


def col2im(cols: np.ndarray, xp_shape: tuple, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got rank {x.data.ndim}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be OIKK, got rank {w.data.ndim}")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ShapeError(f"channel mismatch: input C={c} but kernel I={i}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be square 1x1 or 3x3, got Kh={kh} Kw={kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} or pad={pad}")
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"output spatial size {oh}x{ow} is empty (H={h}, W={wd})")
    parents = [x, w]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (o,):
            raise ShapeError(f"bias length {bias.shape} does not match O={o}")
        parents.append(bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = np.ascontiguousarray(xp)
    cols = im2col(xp, kh, stride, oh, ow)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            gxp = col2im(gcols, xp.shape, kh, stride, oh, ow)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(y, "conv2d", parents, _backward)


# ---------------------------------------------------------------------------
# elementwise and channel ops
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.data.dtype)
    return _result(y, "relu", [x], lambda g: [g * mask])


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", [a, b], lambda g: [g, g])


def scale(x, factor: float) -> Tensor:
    x = _wrap(x)
    return _result(x.data * x.data.dtype.type(factor), "scale", [x], lambda g: [g * factor])


def sum_all(x) -> Tensor:
    x = _wrap(x)
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum", [x],
                   lambda g: [np.broadcast_to(g, x.shape).copy()])


def _channel_view(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def channel_affine(x, gain, shift) -> Tensor:
    """y[n, c] = gain[c] * x[n, c] + shift[c] for NCHW (or NC) inputs."""
    x, gain, shift = _wrap(x), _wrap(gain), _wrap(shift)
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine gain/shift lengths {gain.shape}/{shift.shape} != C={c}")
    nd = x.data.ndim
    gv = _channel_view(gain.data, nd)
    y = x.data * gv + _channel_view(shift.data, nd)
    red = (0,) + tuple(range(2, nd))

    def _backward(g):
        return [g * gv if x.requires_grad else None,
                (g * x.data).sum(axis=red),
                g.sum(axis=red)]

    return _result(y, "channel_affine", [x, gain, shift], _backward)


# ---------------------------------------------------------------------------
# fake quantizers (straight-through estimators)
# ---------------------------------------------------------------------------

def _check_bits(b: int) -> None:
    if not 2 <= b <= 32:
        raise ValueError(f"bit-width must be in [2, 32], got {b}")


def _work_dtype(bits: int, dtype):
    # float32 cannot hold integer codes above 2**24 exactly
    return np.float64 if bits > 16 else dtype


def fake_quant_weight(w, s, bits: int) -> Tensor:
    """Symmetric signed fake quantization with per-channel (axis 0) or per-tensor scale.

    Forward: ``clamp(round(w/s), -2^(b-1), 2^(b-1)-1) * s``.
    Backward (LSQ): d/dw is 1 where the rounded code lies strictly inside the
    clamp bounds; d/ds is ``round(w/s) - w/s`` there and the clamp bound
    elsewhere.
    """
    w, s = _wrap(w), _wrap(s)
    _check_bits(bits)
    if np.any(s.data <= 0):
        raise ValueError("weight scale must be positive")
    per_channel = s.data.size > 1
    if per_channel and s.shape != (w.shape[0],):
        raise ShapeError(f"scale length {s.shape} != output channels {w.shape[0]}")
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    wd = _work_dtype(bits, w.data.dtype)
    sv = s.data.astype(wd).reshape((-1,) + (1,) * (w.data.ndim - 1)) if per_channel \
        else s.data.astype(wd).reshape(())
    u = w.data.astype(wd) / sv
    r = np.rint(u)
    inside = (r > lo) & (r < hi)
    q = np.clip(r, lo, hi)
    y = (q * sv).astype(w.data.dtype)
    ds_local = np.where(inside, r - u, q).astype(w.data.dtype)
    red = tuple(range(1, w.data.ndim))

    def _backward(g):
        gw = g * inside if w.requires_grad else None
        gs = None
        if s.requires_grad:
            gs = (g * ds_local).sum(axis=red) if per_channel else (g * ds_local).sum()
            gs = np.asarray(gs, dtype=s.data.dtype).reshape(s.shape)
        return [gw, gs]

    return _result(y, "fake_quant_weight", [w, s], _backward)


def fake_quant_act(x, params) -> Tensor:
    """Asymmetric per-tensor fake quantization driven by frozen extremes.

    ``params`` needs ``bits``, ``x_min``, ``x_max``, ``frozen`` and the
    learnable tensors ``eta`` (range multiplier) and ``eps`` (zero-point
    correction).  With ``r = (x_max - x_min)/(2^b - 1)``::

        s = r * eta;  beta = round(-x_min/s - eps)
        y = (clamp(round(x/s) + beta, 0, 2^b - 1) - beta) * s

    Backward replaces each round(u) by u plus a detached offset.
    """
    if not getattr(params, "frozen", False):
        raise ValueError("activation quantizer extremes are not frozen")
    x = _wrap(x)
    eta, eps = _wrap(params.eta), _wrap(params.eps)
    bits = params.bits
    _check_bits(bits)
    eta_v = float(eta.data.reshape(-1)[0])
    if eta_v <= 0:
        raise ValueError("eta must be positive")
    eps_v = float(eps.data.reshape(-1)[0])
    qmax = 2 ** bits - 1
    rng = (float(params.x_max) - float(params.x_min)) / qmax
    s = rng * eta_v
    beta = float(np.rint(-float(params.x_min) / s - eps_v))
    wd = _work_dtype(bits, x.data.dtype)
    u = x.data.astype(wd) / s
    r = np.rint(u)
    code = r + beta
    inside = (code > 0) & (code < qmax)
    q = np.clip(code, 0, qmax)
    y = ((q - beta) * s).astype(x.data.dtype)
    # d y / d s, elementwise on the surrogate
    ds_local = np.where(inside, r - u, q - beta - float(params.x_min) / s).astype(x.data.dtype)
    clamped = ~inside

    def _backward(g):
        gx = g * inside if x.requires_grad else None
        g_eta = g_eps = None
        if eta.requires_grad:
            g_eta = np.full(eta.shape, (g * ds_local).sum() * rng, dtype=eta.data.dtype)
        if eps.requires_grad:
            g_eps = np.full(eps.shape, (g * clamped).sum() * s, dtype=eps.data.dtype)
        return [gx, g_eta, g_eps]

    return _result(y, "fake_quant_act", [x, eta, eps], _backward)


# ---------------------------------------------------------------------------
# losses and classifier head
# ---------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape mismatch {a.shape} vs {b.shape}")


def mae_loss(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mae_loss")
    d = a.data - b.data
    n = d.size
    out = np.asarray(np.abs(d).mean(), dtype=d.dtype)

    def _backward(g):
        ga = np.sign(d) * (g / n)
        return [ga, -ga]

    return _result(out, "mae_loss", [a, b], _backward)


def mse_loss(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mse_loss")
    d = a.data - b.data
    n = d.size
    out = np.asarray(np.square(d).mean(), dtype=d.dtype)

    def _backward(g):
        ga = d * (2.0 * g / n)
        return [ga, -ga]

    return _result(out, "mse_loss", [a, b], _backward)


def gap(x) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError("gap expects NCHW input")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))
    return _result(y, "gap", [x],
                   lambda g: [np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()])


def linear(x, w, bias=None) -> Tensor:
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    parents = [x, w]
    y = x.data @ w.data.T
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"linear bias {bias.shape} != K={w.shape[0]}")
        y = y + bias.data
        parents.append(bias)

    def _backward(g):
        grads = [g @ w.data if x.requires_grad else None,
                 g.T @ x.data if w.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result(y, "linear", parents, _backward)


def softmax_xent(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def _backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return [p * (g / n)]

    return _result(out, "softmax_xent", [logits], _backward)


def batch_norm_train(x, gamma, beta, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batch normalization with batch statistics; returns (y, batch_mean, batch_var)."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    axes = (0, 2, 3)
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = x.data.size // x.shape[1]

    def _backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = (gamma.data * inv)[None, :, None, None] / m * (
                m * g - gb[None, :, None, None] - xhat * gg[None, :, None, None])
        return [gx, gg, gb]

    return _result(y.astype(x.data.dtype), "batch_norm", [x, gamma, beta], _backward), mean, var


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine-decayed learning rate at zero-based ``step``."""
    if total_steps <= 0:
        return base_lr
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps)))


@dataclass
class OptimState:
    """Adam moments for a flat list of parameters, each with its own base lr."""

    lrs: list[float]
    total_steps: int
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState) -> None:
    """One Adam update with cosine-decayed learning rates, in place on ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        lr = cosine_lr(state.lrs[i], state.step, state.total_steps)
        m = state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * (g * g)
        if lr == 0.0:
            continue
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.data.dtype)
    state.step = t


class Adam:
    """Adam over parameter groups ``[(params, lr), ...]`` with cosine decay."""

    def __init__(self, groups: Iterable[tuple[Sequence[Tensor], float]], total_steps: int):
        self.params: list[Tensor] = []
        lrs = []
        for params, lr in groups:
            for p in params:
                self.params.append(p)
                lrs.append(lr)
        self.state = OptimState(lrs=lrs, total_steps=total_steps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
