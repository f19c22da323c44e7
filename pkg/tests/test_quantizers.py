import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repapq.analysis import optimal_clip, sample_mixture
from repapq.fusion import fuse_graph
from repapq.graph import build_reference_graph
from repapq.quantizers import (ActQuantParams, ClipSearchConfig, DegenerateRangeError, WeightQuantParams,
                               attach_quantizers, calibrate_batchquant, clip_search, init_minmax,
                               minmax_per_channel, parse_scheme)

# Optimal 8-bit MSE clip of N(0,1), from exact cell-by-cell integration of the
# expected squared error (Gaussian CDF/PDF moments) over a 4001-point clip grid.
H8_MSE = 3.907


def test_minmax_symmetric_and_asymmetric():
    assert init_minmax(np.linspace(-1, 1, 11), 8) == pytest.approx(1 / 127)
    s, zp = init_minmax(np.linspace(0, 4, 9), 8, symmetric=False)
    assert s == pytest.approx(4 / 255) and zp == 0


def test_degenerate_tensors_rejected():
    with pytest.raises(DegenerateRangeError):
        init_minmax(np.full(5, 0.3), 8)
    with pytest.raises(DegenerateRangeError):
        clip_search(np.ones(10), 8)
    with pytest.raises(ValueError):
        WeightQuantParams(8, [0.1, 0.0])
    with pytest.raises(ValueError):
        ClipSearchConfig(p=3)


def test_gaussian_clip_matches_analytic_optimum():
    v = np.random.default_rng(0).standard_normal(200_000)
    assert optimal_clip(v, 8, 2, grid=400) == pytest.approx(H8_MSE, rel=0.03)


def test_degenerate_mixture_clip_equals_gaussian_clip():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(100_000)
    mix = sample_mixture(np.random.default_rng(1), (1.0, 1.0), 100_000)
    assert optimal_clip(mix, 8, 2) == pytest.approx(optimal_clip(v, 8, 2), rel=0.03)


def test_mixture_clip_is_twice_gaussian_clip_for_mae():
    # mixture of N(0,1) and N(0,9): the mean-scale rule predicts k = (1 + 3) / 2
    rng = np.random.default_rng(2)
    h = optimal_clip(rng.standard_normal(1_000_000), 8, 1)
    mix = optimal_clip(sample_mixture(rng, (1.0, 3.0), 1_000_000), 8, 1)
    assert mix == pytest.approx(2.0 * h, rel=0.05)


def test_mse_clip_is_not_smaller_than_mae_clip():
    v = sample_mixture(np.random.default_rng(3), (1.0, 6.0), 50_000)
    assert optimal_clip(v, 8, 2) >= optimal_clip(v, 8, 1)


@given(st.integers(2, 8), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_clip_search_never_worse_than_minmax(bits, seed):
    v = np.random.default_rng(seed).standard_t(3, size=500)
    hi = 2 ** (bits - 1) - 1

    def err(s):
        return np.sum((v - np.clip(np.rint(v / s), -hi - 1, hi) * s) ** 2)

    assert err(clip_search(v, bits, 2)) <= err(np.abs(v).max() / hi) + 1e-12


def test_batchquant_ema():
    q = calibrate_batchquant(ActQuantParams(8), [np.array([0.0, 1.0]), np.array([0.0, 3.0])], momentum=0.9)
    assert q.x_max == pytest.approx(1.2) and q.frozen
    one = calibrate_batchquant(ActQuantParams(8), [np.array([-0.5, 2.0])])
    assert (one.x_min, one.x_max) == (-0.5, 2.0)
    same = calibrate_batchquant(ActQuantParams(8), [np.array([-1.0, 4.0])] * 7, momentum=0.3)
    assert same.x_min == pytest.approx(-1.0) and same.x_max == pytest.approx(4.0)
    with pytest.raises(RuntimeError):
        same.observe(np.ones(2))


def test_batchquant_rejects_constant_batches():
    with pytest.raises(DegenerateRangeError):
        calibrate_batchquant(ActQuantParams(8), [np.zeros(4)])


def test_zero_point_in_code_range():
    q = calibrate_batchquant(ActQuantParams(6), [np.random.default_rng(4).normal(1.0, 2.0, 1000)])
    assert 0 <= q.zero_point <= 2 ** 6 - 1
    codes = q.codes(np.linspace(-20, 20, 101))
    assert codes.min() == 0 and codes.max() == 63


def test_parse_scheme():
    assert parse_scheme("W8A8") == (8, 8)
    assert parse_scheme("w4a6") == (4, 6)
    for bad in ("W1A8", "W8", "8A8", "W40A8"):
        with pytest.raises(ValueError):
            parse_scheme(bad)


def test_attach_with_first_last_override():
    g = fuse_graph(build_reference_graph(seed=1), qprep=True)
    attach_quantizers(g, "W6A6", first_last_bits=8)
    blocks = [b for _, _, b in g.blocks()]
    assert blocks[0].w_quant.bits == 8 and blocks[0].a_quant.bits == 8
    assert g.head.w_quant.bits == 8 and g.head.a_quant.bits == 8
    assert all(b.w_quant.bits == 6 and b.a_quant.bits == 6 for b in blocks[1:])
    assert all(b.w_quant.scale.size == b.out_channels for b in blocks)


def test_attach_w8a8_and_override_never_lowers_precision():
    g = fuse_graph(build_reference_graph(seed=2), qprep=True)
    attach_quantizers(g, "W8A8")
    assert {b.w_quant.bits for _, _, b in g.blocks()} == {8}
    g = fuse_graph(build_reference_graph(seed=2), qprep=True)
    attach_quantizers(g, "W32A32", first_last_bits=8)
    assert g.head.w_quant.bits == 32 and g.stages[0].blocks[0].a_quant.bits == 32


def test_attach_requires_fused_graph():
    with pytest.raises(ValueError):
        attach_quantizers(build_reference_graph(), "W8A8")


def test_minmax_per_channel_scales():
    w = np.zeros((2, 1, 3, 3), np.float32)
    w[0, 0, 1, 1], w[1, 0, 0, 0] = 1.27, -2.54
    np.testing.assert_allclose(minmax_per_channel(w, 8), [0.01, 0.02], rtol=1e-6)
    np.testing.assert_array_equal(WeightQuantParams(8, [0.01, 0.02]).codes(w)[:, 0, 1, 1], [127, 0])
