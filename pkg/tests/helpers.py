"""Independent oracles shared by the test modules."""
import numpy as np


def conv2d_loops(x, w, bias=None, stride=1, pad=0):
    """Six nested loops; deliberately naive."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((n, o, oh, ow))
    for a in range(n):
        for b in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if bias is None else float(bias[b])
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[b, ci, di, dj] * xp[a, ci, i * stride + di, j * stride + dj]
                    y[a, b, i, j] = acc
    return y


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def _col(s, ndim):
    return s.reshape((-1,) + (1,) * (ndim - 1)) if s.size > 1 else s.reshape(())


def fq_weight_surrogate(w, s, *, c, inside, q):
    """STE surrogate of the weight quantizer: round(u) -> u + c inside the
    clamp range, the frozen bound code ``q`` outside."""
    sv = _col(s, w.ndim)
    return np.where(inside, (w / sv + c) * sv, q * sv)


def weight_offsets(w, s, bits):
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    u = w / _col(s, w.ndim)
    r = np.rint(u)
    return dict(c=r - u, inside=(r > lo) & (r < hi), q=np.clip(r, lo, hi))


def fq_act_surrogate(x, eta, eps, *, x_min, x_max, bits, c_x, c_beta, inside, q):
    """STE surrogate of the activation quantizer.

    ``c_x`` and ``c_beta`` are the rounding offsets of x/s and of the zero
    point, ``inside`` the unclamped mask and ``q`` the clamped codes, all frozen
    at the evaluation point.
    """
    s = (x_max - x_min) / (2 ** bits - 1) * eta
    beta = -x_min / s - eps + c_beta
    return np.where(inside, (x / s + c_x) * s, (q - beta) * s)


def act_offsets(x, x_min, x_max, bits, eta, eps):
    """Frozen quantities for :func:`fq_act_surrogate` at the evaluation point."""
    qmax = 2 ** bits - 1
    s = (x_max - x_min) / qmax * eta
    beta_real = -x_min / s - eps
    beta = np.rint(beta_real)
    u = x / s
    code = np.rint(u) + beta
    inside = (code > 0) & (code < qmax)
    return dict(c_x=np.rint(u) - u, c_beta=beta - beta_real, inside=inside, q=np.clip(code, 0, qmax))
