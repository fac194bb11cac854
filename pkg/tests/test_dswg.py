import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsmix.dswg import (
    DSWGParams,
    band_attention,
    dswg_backward,
    dswg_muladds,
    dswg_op_count,
    expand_weights,
    gelu,
    gelu_grad,
    generate_mask,
    init_dswg_params,
    layer_norm,
    normalize_weights,
    pool_spectrum,
    softmax_backward,
)
from dsmix.errors import InvalidArgumentError, InvalidStateError, NumericError, ShapeError
from dsmix.gradcheck import check_dswg
from dsmix.spectral import zigzag_flatten, zigzag_order, zigzag_unflatten


def params(l=4, K=8, seed=0, **kw):
    return init_dswg_params(l, K, np.random.default_rng(seed), **kw)


# ---------------------------------------------------------------- pooling


def test_pool_examples():
    np.testing.assert_allclose(pool_spectrum(np.arange(1.0, 9.0), 4), [1.5, 3.5, 5.5, 7.5])
    e = np.random.default_rng(0).standard_normal(12)
    np.testing.assert_array_equal(pool_spectrum(e, 12), e)
    np.testing.assert_allclose(pool_spectrum(np.full(10, 2.5), 3), np.full(3, 2.5), rtol=1e-15)


def test_pool_uneven_windows_follow_floor_rule():
    n, l = 10, 3  # windows [0,3) [3,6) [6,10)
    e = np.arange(n, dtype=float)
    np.testing.assert_allclose(pool_spectrum(e, l), [1.0, 4.0, 7.5])


def test_pool_rejects_upsampling():
    with pytest.raises(InvalidArgumentError):
        pool_spectrum(np.zeros(4), 5)
    with pytest.raises(InvalidArgumentError):
        pool_spectrum(np.zeros(4), 0)


# ---------------------------------------------------------------- attention pieces


def test_layer_norm_reference():
    y, _, _ = layer_norm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3))
    np.testing.assert_allclose(y, [-1.22474, 0.0, 1.22474], atol=1e-5)


def test_gelu_values():
    assert gelu(np.array(0.0)) == 0.0
    assert gelu(np.array(1.0)) == pytest.approx(0.841345, abs=1e-6)
    x = np.linspace(-4, 4, 41)
    num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    np.testing.assert_allclose(gelu_grad(x), num, atol=1e-8)


def test_zero_params_give_zero_scores():
    l, K = 5, 7
    p = DSWGParams(l=l, K=K, ln_scale=np.zeros(l), ln_shift=np.zeros(l), w1=np.zeros((K, l)),
                   b1=np.zeros(K), w2=np.zeros((l, K)), b2=np.zeros(l))
    assert np.array_equal(band_attention(np.random.default_rng(1).standard_normal(l), p), np.zeros(l))


def test_band_attention_shape_errors():
    with pytest.raises(ShapeError):
        band_attention(np.zeros(3), params(l=4))
    with pytest.raises(ShapeError):
        DSWGParams(l=4, K=2, ln_scale=np.ones(4), ln_shift=np.zeros(4), w1=np.zeros((2, 3)),
                   b1=np.zeros(2), w2=np.zeros((4, 2)), b2=np.zeros(4))


def test_softmax_examples():
    np.testing.assert_allclose(normalize_weights(np.zeros(4)), np.full(4, 0.25), rtol=1e-15)
    np.testing.assert_allclose(normalize_weights(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-12)
    s = np.array([1000.0, 999.0, -1000.0])  # would overflow without max-subtraction
    assert np.isfinite(normalize_weights(s)).all()
    with pytest.raises(NumericError):
        normalize_weights(np.array([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(values, c):
    s = np.array(values)
    w = normalize_weights(s)
    assert abs(w.sum() - 1.0) < 1e-12
    assert (w >= 0).all() and (w <= 1).all()
    np.testing.assert_allclose(normalize_weights(s + c), w, atol=1e-12)


def test_softmax_jacobian_rows_sum_to_zero():
    w = normalize_weights(np.random.default_rng(2).standard_normal(6))
    J = np.stack([softmax_backward(np.eye(6)[i], w) for i in range(6)])
    np.testing.assert_allclose(J, np.diag(w) - np.outer(w, w), atol=1e-15)
    assert np.abs(J.sum(axis=1)).max() < 1e-12


# ---------------------------------------------------------------- expansion


def test_expand_unit_windows():
    order = zigzag_order(3, 2)
    s_hat = normalize_weights(np.arange(6.0))
    assert np.array_equal(expand_weights(s_hat, order), zigzag_unflatten(order, s_hat))


def test_expand_uniform_with_gain_is_allpass():
    order = zigzag_order(4, 5)
    np.testing.assert_allclose(expand_weights(np.full(7, 1 / 7), order, mask_gain=7), np.ones((4, 5)))


def test_expand_replicates_windows():
    order = zigzag_order(2, 4)
    s_hat = np.array([0.1, 0.2, 0.3, 0.4])
    mask = expand_weights(s_hat, order)
    np.testing.assert_array_equal(zigzag_flatten(order, mask), [0.1, 0.1, 0.2, 0.2, 0.3, 0.3, 0.4, 0.4])


def test_expand_too_many_weights():
    with pytest.raises(ShapeError):
        expand_weights(np.ones(5), zigzag_order(2, 2))


# ---------------------------------------------------------------- generate_mask


def test_mask_positive_and_window_values_sum_to_one():
    order = zigzag_order(6, 6)
    p = params(l=8, K=16)
    mask, act = generate_mask(np.random.default_rng(3).standard_normal((6, 6)), order, p)
    assert (mask > 0).all()
    assert abs(act.s_hat.sum() - 1.0) < 1e-12
    # the distinct values are the window weights
    starts = np.arange(8) * 36 // 8
    assert abs(zigzag_flatten(order, mask)[starts].sum() - 1.0) < 1e-12


def test_mask_invariant_to_pooled_shift():
    order = zigzag_order(6, 6)
    p = params(l=8, K=16, seed=4)
    spec = np.random.default_rng(4).standard_normal((6, 6))
    shifted = spec + 3.7  # every window mean moves by the same constant
    m1, _ = generate_mask(spec, order, p)
    m2, _ = generate_mask(shifted, order, p)
    assert np.abs(m1 - m2).max() < 1e-12


def test_mask_depends_on_input():
    order = zigzag_order(6, 6)
    p = params(l=8, K=16, seed=5)
    rng = np.random.default_rng(5)
    m1, _ = generate_mask(rng.standard_normal((6, 6)), order, p)
    m2, _ = generate_mask(rng.standard_normal((6, 6)), order, p)
    assert np.abs(m1 - m2).max() > 1e-6


def test_channels_share_one_parameter_record():
    order = zigzag_order(4, 4)
    p = params(l=4, K=4)
    spec = np.random.default_rng(6).standard_normal((3, 4, 4))
    masks, act = generate_mask(spec, order, p)
    assert act.params is p
    for c in range(3):
        single, _ = generate_mask(spec[c], order, p)
        np.testing.assert_allclose(masks[c], single, atol=1e-15)


def test_truncation_zeroes_high_bands():
    order = zigzag_order(4, 4)
    p = params(l=4, K=4, truncate_to=6)
    spec = np.random.default_rng(7).standard_normal((4, 4))
    altered = spec.copy()
    for u, v in order.pairs()[6:]:
        altered[u, v] += 10.0
    m1, _ = generate_mask(spec, order, p)
    m2, _ = generate_mask(altered, order, p)
    np.testing.assert_array_equal(m1, m2)


def test_l_larger_than_grid():
    with pytest.raises(InvalidArgumentError):
        generate_mask(np.zeros((2, 2)), zigzag_order(2, 2), params(l=5))


# ---------------------------------------------------------------- backward


def test_zero_grad_mask_gives_zero_gradients():
    order = zigzag_order(5, 5)
    p = params(l=6, K=8)
    _, act = generate_mask(np.random.default_rng(8).standard_normal((2, 5, 5)), order, p)
    g_spec, grads = dswg_backward(act, np.zeros((2, 5, 5)), p)
    assert not g_spec.any()
    assert all(not g.any() for g in grads.values())


def test_backward_rejects_foreign_params():
    order = zigzag_order(4, 4)
    p = params()
    _, act = generate_mask(np.zeros((4, 4)), order, p)
    with pytest.raises(InvalidStateError):
        dswg_backward(act, np.zeros((4, 4)), params())
    with pytest.raises(ShapeError):
        dswg_backward(act, np.zeros((4, 3)), p)


def test_finite_difference_six_by_six():
    result = check_dswg(l=8, K=16, H=6, W=6)
    assert result.coordinates == 2 * 36 + 8 + 8 + 16 * 8 + 16 + 8 * 16 + 8
    assert result.max_rel_error < 1e-4, result


@pytest.mark.parametrize("l,K,H,W", [(1, 3, 2, 2), (5, 4, 3, 7), (16, 32, 8, 8)])
def test_finite_difference_other_shapes(l, K, H, W):
    assert check_dswg(l=l, K=K, H=H, W=W, seed=l).max_rel_error < 1e-4


def test_operation_count_is_linear_in_l():
    K = 32
    counts = [dswg_muladds(l, K) for l in (4, 8, 16, 32)]
    assert counts == [2 * K * l + K + l for l in (4, 8, 16, 32)]
    diffs = np.diff(counts) / np.diff([4, 8, 16, 32])
    assert np.all(diffs == 2 * K + 1)
    assert dswg_op_count(params(l=16, K=32)) == dswg_muladds(16, 32)
