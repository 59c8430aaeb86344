import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attnflow.errors import DimensionError, ValidationError
from attnflow.warp_ops import (
    attention_correlation,
    attention_warp,
    blend,
    flow_warp,
    identity_correlation,
    resize,
    resize_flow,
)

from conftest import grad_rel_err
from oracles import bilinear_oracle, softmax_oracle


@pytest.mark.parametrize("mode", ["clamp", "zeros"])
def test_flow_warp_matches_loop_oracle(mode):
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    for _ in range(100):
        x = torch.randn(1, 2, 8, 8, generator=g)
        flow = torch.randn(1, 2, 8, 8, generator=g) * 3
        got = flow_warp(x, flow, mode).numpy()
        worst = max(worst, np.abs(got - bilinear_oracle(x.numpy(), flow.numpy(), mode)).max())
    assert worst <= 1e-6


def test_zero_flow_is_identity():
    x = torch.randn(2, 3, 5, 7)
    assert torch.equal(flow_warp(x, torch.zeros(2, 2, 5, 7)), x)


def test_integer_flow_is_a_gather():
    x = torch.arange(2 * 6 * 6, dtype=torch.float32).reshape(1, 2, 6, 6)
    flow = torch.zeros(1, 2, 6, 6)
    flow[:, 0] = 1.0
    flow[:, 1] = -2.0
    out = flow_warp(x, flow)
    # rows 2.. and columns ..4 keep the sampling position in bounds
    assert torch.equal(out[:, :, 2:, :5], x[:, :, :4, 1:])


def test_uniform_half_pixel_shift_averages_neighbours():
    x = torch.randn(1, 1, 4, 6, dtype=torch.float64)
    flow = torch.zeros(1, 2, 4, 6, dtype=torch.float64)
    flow[:, 0] = 0.5
    out = flow_warp(x, flow)
    assert torch.allclose(out[..., :-1], 0.5 * (x[..., :-1] + x[..., 1:]), atol=1e-12)


def test_far_out_of_bounds_modes():
    x = torch.randn(1, 3, 4, 4)
    flow = torch.full((1, 2, 4, 4), 50.0)
    assert torch.equal(flow_warp(x, flow, "zeros"), torch.zeros_like(x))
    clamped = flow_warp(x, flow, "clamp")
    assert torch.equal(clamped, x[:, :, 3:, 3:].expand_as(x))


def test_flow_warp_rejects_bad_inputs():
    x = torch.randn(1, 3, 4, 4)
    with pytest.raises(DimensionError):
        flow_warp(x, torch.zeros(1, 2, 4, 5))
    with pytest.raises(ValidationError):
        flow_warp(x, torch.zeros(1, 2, 4, 4), border_mode="reflect")
    bad = torch.zeros(1, 2, 4, 4)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        flow_warp(x, bad)


def test_attention_correlation_matches_softmax_oracle():
    g = torch.Generator().manual_seed(2)
    keys = torch.randn(2, 4, 3, 3, generator=g) * 0.1
    queries = torch.randn(2, 4, 3, 3, generator=g) * 0.1
    got = attention_correlation(keys, queries, alpha=100.0).double().numpy()
    assert np.abs(got - softmax_oracle(keys, queries, 100.0)).max() <= 1e-6


def test_attention_columns_sum_to_one_even_with_large_logits():
    g = torch.Generator().manual_seed(3)
    keys = torch.randn(1, 8, 4, 4, generator=g) * 10
    queries = torch.randn(1, 8, 4, 4, generator=g) * 10
    c = attention_correlation(keys, queries)
    assert torch.isfinite(c).all()
    assert torch.allclose(c.sum(dim=1), torch.ones(1, 16), atol=1e-5)


def test_attention_columns_sum_to_one_over_a_flat_background():
    # 1000 of 1024 source positions share one key, as on a constant background
    g = torch.Generator().manual_seed(4)
    keys = torch.randn(8, 4, 32, 32, generator=g) * 0.05
    keys.view(8, 4, -1)[:, :, :1000] = 0.01
    queries = torch.randn(8, 4, 32, 32, generator=g) * 0.05
    c = attention_correlation(keys, queries)
    assert c.dtype == torch.float32
    assert (c.sum(dim=1) - 1).abs().max() <= 1e-5


def test_attention_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        attention_correlation(torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 4))
    with pytest.raises(DimensionError):
        attention_warp(torch.randn(1, 2, 3, 3), torch.randn(1, 8, 8))


def test_identity_correlation_warp_is_exact():
    x = torch.randn(2, 5, 4, 3)
    assert torch.equal(attention_warp(x, identity_correlation(2, 4, 3)), x)


def test_attention_warp_of_permutation_matrix():
    x = torch.randn(1, 2, 2, 2)
    perm = [3, 2, 1, 0]  # target j takes source perm[j]
    corr = torch.zeros(1, 4, 4)
    for j, i in enumerate(perm):
        corr[0, i, j] = 1.0
    out = attention_warp(x, corr).reshape(1, 2, 4)
    assert torch.equal(out, x.reshape(1, 2, 4)[:, :, perm])


@pytest.mark.parametrize("seed", [0, 1])
def test_attention_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    keys = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64) * 0.1
    queries = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64) * 0.1
    x = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    probe = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)

    def fn(k, q, v):
        return (attention_warp(v, attention_correlation(k, q, alpha=5.0)) * probe).sum()

    for i in range(3):
        assert grad_rel_err(fn, [keys, queries, x], i, step=1e-5) < 1e-4


@pytest.mark.parametrize("mode", ["clamp", "zeros"])
def test_flow_warp_gradients(mode):
    g = torch.Generator().manual_seed(4)
    x = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    flow = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64) * 2
    # keep every sampling coordinate at least 1e-3 away from an integer
    frac = flow - torch.floor(flow)
    flow = torch.where(frac < 1e-2, flow + 2e-2, flow)
    flow = torch.where(frac > 1 - 1e-2, flow - 2e-2, flow)
    probe = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)

    def fn(v, w):
        return (flow_warp(v, w, mode) * probe).sum()

    assert grad_rel_err(fn, [x, flow], 0, step=1e-5) < 1e-4
    assert grad_rel_err(fn, [x, flow], 1, step=1e-5) < 1e-4


def test_blend_endpoints_are_bitwise():
    a = torch.randn(2, 4, 5, 5)
    f = torch.randn(2, 4, 5, 5)
    assert torch.equal(blend(a, f, torch.ones(2, 1, 5, 5)), a)
    assert torch.equal(blend(a, f, torch.zeros(2, 1, 5, 5)), f)
    assert torch.equal(blend(a, a, torch.rand(2, 1, 5, 5)), a)


def test_blend_validation():
    a = torch.randn(1, 2, 3, 3)
    with pytest.raises(ValidationError):
        blend(a, a, torch.full((1, 1, 3, 3), 1.5))
    with pytest.raises(DimensionError):
        blend(a, a, torch.ones(1, 2, 3, 3))


@settings(max_examples=30, deadline=None)
@given(m=st.floats(0.0, 1.0), seed=st.integers(0, 2**16))
def test_blend_is_convex_combination(m, seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    f = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    out = blend(a, f, torch.full((1, 1, 4, 4), m, dtype=torch.float64))
    assert torch.allclose(out, m * a + (1 - m) * f, atol=1e-12)


def test_resize_same_size_is_identity():
    x = torch.randn(1, 3, 6, 6)
    assert resize(x, (6, 6)) is x


def test_resize_half_averages_blocks():
    x = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    expected = x.reshape(1, 2, 4, 2, 4, 2).mean(dim=(3, 5))
    assert torch.allclose(resize(x, (4, 4)), expected, atol=1e-12)


def test_resize_flow_rescales_offsets():
    flow = torch.ones(1, 2, 8, 8)
    flow[:, 1] = -2.0
    out = resize_flow(flow, (16, 16))
    assert torch.allclose(out[:, 0], torch.full((1, 16, 16), 2.0))
    assert torch.allclose(out[:, 1], torch.full((1, 16, 16), -4.0))


@settings(max_examples=20, deadline=None)
@given(tx=st.integers(-2, 2), ty=st.integers(-2, 2), seed=st.integers(0, 1000))
def test_flow_warp_integer_translation_property(tx, ty, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 1, 7, 7, generator=g)
    flow = torch.zeros(1, 2, 7, 7)
    flow[:, 0], flow[:, 1] = float(tx), float(ty)
    out = flow_warp(x, flow, "zeros")
    for r in range(7):
        for c in range(7):
            sr, sc = r + ty, c + tx
            want = x[0, 0, sr, sc] if 0 <= sr < 7 and 0 <= sc < 7 else 0.0
            assert float(out[0, 0, r, c]) == float(want)
