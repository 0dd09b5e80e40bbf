import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mssfc.tensor import (ParamStore, Rng, ShapeError, Tensor, add, add_scalar,
                          bce_with_logits, channel_dot, channel_mean,
                          channel_var, clamp_min, concat_c, concat_h, div,
                          expand, fd_gradcheck, flatten_hw, mean_all, mul,
                          scale, sigmoid, split_c, split_h, sub, sum_all,
                          upsample)


def _rand(shape, seed=0):
    return Rng(seed).uniform(-1.0, 1.0, shape)


# ---------------------------------------------------------------- construction


def test_rank4_enforced():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 4, 4)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 4, 4)))


def test_item_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 2, 1))).item()
    assert Tensor(np.full((1, 1, 1, 1), 2.5)).item() == 2.5


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 2, 1)), requires_grad=True).backward()


# ----------------------------------------------------------------- elementwise


def test_binary_forward_oracle():
    a = Tensor(_rand((2, 3, 4, 5), 1))
    b = Tensor(_rand((2, 3, 4, 5), 2))
    np.testing.assert_array_equal(add(a, b).data, a.data + b.data)
    np.testing.assert_array_equal(sub(a, b).data, a.data - b.data)
    np.testing.assert_array_equal(mul(a, b).data, a.data * b.data)
    c = Tensor(_rand((2, 3, 4, 5), 3) + 2.0)
    np.testing.assert_array_equal(div(a, c).data, a.data / c.data)


def test_channel_broadcast():
    a = Tensor(_rand((2, 3, 4, 5), 1))
    b = Tensor(_rand((2, 1, 4, 5), 2))
    np.testing.assert_array_equal(add(a, b).data, a.data + b.data)


def test_broadcast_backward_sums_over_channels():
    a = Tensor(_rand((1, 3, 2, 2), 1), requires_grad=True)
    b = Tensor(_rand((1, 1, 2, 2), 2), requires_grad=True)
    sum_all(mul(a, b)).backward()
    np.testing.assert_allclose(b.grad, a.data.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, a.shape))


def test_mismatched_shapes_raise():
    a = Tensor(np.zeros((1, 3, 4, 4)))
    b = Tensor(np.zeros((1, 3, 4, 5)))
    with pytest.raises(ShapeError):
        add(a, b)
    with pytest.raises(ShapeError):
        add(a, Tensor(np.zeros((2, 3, 4, 4))))


def test_grad_accumulates_on_reuse():
    x = Tensor(np.full((1, 1, 1, 1), 3.0), requires_grad=True)
    sum_all(add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 1, 1), 2.0))


def test_diamond_graph_grads():
    x = Tensor(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
    y = mul(add(x, x), sub(x, scale(x, 0.5)))  # (2x)(x/2) = x^2
    y.backward()
    np.testing.assert_allclose(x.grad, [[[[4.0]]]])


def test_scale_and_add_scalar():
    x = Tensor(_rand((1, 2, 3, 4)))
    np.testing.assert_array_equal(scale(x, -2.0).data, -2.0 * x.data)
    np.testing.assert_allclose(add_scalar(x, 0.5).data, x.data + 0.5)


def test_sigmoid_stable_at_extremes():
    x = Tensor(np.array([[[[-1e4, -30.0, 0.0, 30.0, 1e4]]]]))
    y = sigmoid(x).data
    assert np.isfinite(y).all()
    assert (y >= 0).all() and (y <= 1).all()
    assert y[0, 0, 0, 2] == 0.5


def test_clamp_min_forward_and_gate():
    x = Tensor(np.array([[[[-1.0, 0.2, 2.0, 0.5]]]]), requires_grad=True)
    y = clamp_min(x, 0.5)
    np.testing.assert_array_equal(y.data, [[[[0.5, 0.5, 2.0, 0.5]]]])
    sum_all(y).backward()
    # only the strictly-above-floor coordinate passes gradient
    np.testing.assert_array_equal(x.grad, [[[[0.0, 0.0, 1.0, 0.0]]]])


# ---------------------------------------------------------------- reductions


def test_channel_stats_oracle():
    x = Tensor(_rand((2, 5, 3, 4), 7))
    np.testing.assert_allclose(channel_mean(x).data,
                               x.data.mean(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(channel_var(x).data,
                               x.data.var(axis=1, keepdims=True), atol=1e-12)


def test_global_reductions():
    x = Tensor(_rand((2, 3, 4, 5), 5))
    assert mean_all(x).item() == pytest.approx(x.data.mean(), abs=1e-12)
    assert sum_all(x).item() == pytest.approx(x.data.sum(), rel=1e-12)


# ------------------------------------------------------------ structure ops


@given(st.lists(st.integers(1, 5), min_size=2, max_size=4))
@settings(max_examples=30, deadline=None)
def test_concat_split_c_roundtrip(sizes):
    parts = [Tensor(_rand((1, c, 3, 2), i)) for i, c in enumerate(sizes)]
    whole = concat_c(parts)
    assert whole.shape[1] == sum(sizes)
    back = split_c(whole, sizes)
    for p, b in zip(parts, back):
        np.testing.assert_array_equal(p.data, b.data)


@given(st.lists(st.integers(1, 6), min_size=2, max_size=4))
@settings(max_examples=30, deadline=None)
def test_concat_split_h_roundtrip(sizes):
    parts = [Tensor(_rand((2, 3, h, 1), i)) for i, h in enumerate(sizes)]
    whole = concat_h(parts)
    assert whole.shape[2] == sum(sizes)
    back = split_h(whole, sizes)
    for p, b in zip(parts, back):
        np.testing.assert_array_equal(p.data, b.data)


def test_split_sizes_must_cover():
    x = Tensor(np.zeros((1, 6, 2, 2)))
    with pytest.raises(ShapeError):
        split_c(x, [2, 2])


def test_flatten_hw_layout():
    x = Tensor(np.arange(24, dtype=np.float64).reshape(1, 2, 3, 4))
    y = flatten_hw(x)
    assert y.shape == (1, 2, 12, 1)
    np.testing.assert_array_equal(y.data[0, 1, :, 0], x.data[0, 1].reshape(-1))


def test_expand_forward_and_backward():
    x = Tensor(_rand((1, 4, 1, 1)), requires_grad=True)
    y = expand(x, (3, 4, 5, 1))
    assert y.shape == (3, 4, 5, 1)
    np.testing.assert_array_equal(y.data, np.broadcast_to(x.data, (3, 4, 5, 1)))
    sum_all(y).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 4, 1, 1), 15.0))


def test_expand_rejects_channel_growth():
    x = Tensor(np.zeros((1, 2, 1, 1)))
    with pytest.raises(ShapeError):
        expand(x, (1, 4, 1, 1))


# ----------------------------------------------------------------- upsampling


def test_upsample_nearest_oracle():
    x = Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2))
    y = upsample(x, 2, "nearest")
    np.testing.assert_array_equal(
        y.data[0, 0], np.repeat(np.repeat(x.data[0, 0], 2, 0), 2, 1))


def test_upsample_bilinear_oracle_1d():
    # half-pixel centers, clamped edges: [0, 2] -> [0, 0.5, 1.5, 2]
    x = Tensor(np.array([[[[0.0, 2.0]]]]))
    y = upsample(x, 2, "bilinear")
    np.testing.assert_allclose(y.data[0, 0, 0], [0.0, 0.5, 1.5, 2.0], atol=1e-12)


def test_upsample_bilinear_preserves_constant():
    x = Tensor(np.full((1, 2, 3, 3), 0.7))
    np.testing.assert_allclose(upsample(x, 4, "bilinear").data, 0.7, atol=1e-12)


# -------------------------------------------------------------- fused kernels


def test_channel_dot_oracle():
    f = Tensor(_rand((2, 5, 3, 4), 1))
    e = Tensor(_rand((2, 5, 1, 1), 2))
    y = channel_dot(f, e)
    assert y.shape == (2, 1, 3, 4)
    np.testing.assert_allclose(y.data, np.einsum("nchw,nc->nhw", f.data,
                                                 e.data[:, :, 0, 0])[:, None],
                               atol=1e-12)


def test_bce_matches_reference():
    rng = Rng(3)
    z = rng.uniform(-4, 4, (2, 1, 3, 3))
    y = (rng.uniform(0, 1, (2, 1, 3, 3)) > 0.5).astype(np.float64)
    loss = bce_with_logits(Tensor(z), y).item()
    p = 1.0 / (1.0 + np.exp(-z))
    ref = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean(axis=(1, 2, 3)).mean()
    assert loss == pytest.approx(ref, abs=1e-10)


def test_bce_sample_weights_exclude():
    rng = Rng(4)
    z = rng.uniform(-3, 3, (2, 1, 2, 2))
    y = np.zeros((2, 1, 2, 2))
    full = bce_with_logits(Tensor(z[:1]), y[:1]).item()
    weighted = bce_with_logits(Tensor(z), y, sample_weights=np.array([1.0, 0.0])).item()
    assert weighted == pytest.approx(full, abs=1e-12)


def test_bce_all_zero_weights_is_zero():
    z = Tensor(np.ones((2, 1, 2, 2)))
    y = np.ones((2, 1, 2, 2))
    assert bce_with_logits(z, y, sample_weights=np.zeros(2)).item() == 0.0


def test_bce_stable_extreme_logits():
    z = Tensor(np.array([[[[900.0, -900.0]]]]))
    y = np.array([[[[1.0, 0.0]]]])
    assert bce_with_logits(z, y).item() == pytest.approx(0.0, abs=1e-12)


# ------------------------------------------------------------------- rng


def test_rng_deterministic_and_forked():
    a = Rng(9).uniform(0, 1, (4,))
    b = Rng(9).uniform(0, 1, (4,))
    np.testing.assert_array_equal(a, b)
    r = Rng(9)
    f1, f2 = r.fork(0), r.fork(1)
    assert not np.array_equal(f1.uniform(0, 1, (4,)), f2.uniform(0, 1, (4,)))


def test_rng_permutation_is_permutation():
    perm = Rng(5).permutation(20)
    assert sorted(perm.tolist()) == list(range(20))


# ---------------------------------------------------------------- gradcheck


def test_fd_gradcheck_accepts_correct_backward():
    store = ParamStore(np.float64)
    x = store.create("x", Rng(1).uniform(-1, 1, (1, 3, 4, 4)))
    err = fd_gradcheck(lambda: mean_all(mul(sigmoid(x.tensor), x.tensor)), x,
                       rng=Rng(2))
    assert err < 1e-6


def test_fd_gradcheck_flags_broken_backward():
    from mssfc.tensor import _accum

    def bad_square(t):
        out = Tensor(t.data * t.data, parents=(t,),
                     backward=lambda g: _accum(t, g))  # should be g * 2t
        return out

    store = ParamStore(np.float64)
    x = store.create("x", Rng(1).uniform(0.5, 1.5, (1, 2, 2, 2)))
    err = fd_gradcheck(lambda: mean_all(bad_square(x.tensor)), x, rng=Rng(2))
    assert err > 1e-2


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.create("w", np.zeros((1, 1, 1, 1)))
    with pytest.raises(KeyError):
        store.create("w", np.zeros((1, 1, 1, 1)))
