from dataclasses import replace

import numpy as np
import pytest

from dsmix.dswg import dswg_muladds, init_dswg_params
from dsmix.errors import ConfigError, InvalidArgumentError, InvalidStateError, NumericError, ShapeError
from dsmix.gradcheck import central_difference, check_model, rel_error, tiny_config
from dsmix.model import (
    DSMBlockParams,
    DSMModel,
    ModelConfig,
    block_backward,
    block_forward,
    count_params_flops,
    dsm_mix,
    dsm_mix_backward,
    model_backward,
    model_forward,
    patch_embed,
    patch_merge,
)


def block_params(C=4, r=2, l=8, K=16, H=6, W=6, seed=0, mlp_zero=False):
    rng = np.random.default_rng(seed)

    def w(a, b):
        return np.zeros((a, b)) if mlp_zero else rng.uniform(-1, 1, (a, b)) / np.sqrt(a)

    return DSMBlockParams(
        dswg=init_dswg_params(l, K, rng),
        ln1_scale=rng.uniform(0.5, 1.5, C), ln1_shift=rng.normal(0, 0.2, C),
        ln2_scale=rng.uniform(0.5, 1.5, C), ln2_shift=rng.normal(0, 0.2, C),
        mlp_w1=w(C, r * C), mlp_b1=np.zeros(r * C) if mlp_zero else rng.normal(0, 0.1, r * C),
        mlp_w2=w(r * C, C), mlp_b2=np.zeros(C) if mlp_zero else rng.normal(0, 0.1, C),
        random_mask=rng.uniform(0, 1, (C, H, W)),
    )


# ---------------------------------------------------------------- patches


def test_patch_embed_shapes_and_linearity():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((16, 8))
    out, _ = patch_embed(rng.uniform(size=(2, 28, 28, 1)), w, np.zeros(8), 4)
    assert out.shape == (2, 7, 7, 8)
    zero, _ = patch_embed(np.zeros((1, 8, 8, 1)), w, np.zeros(8), 4)
    assert not zero.any()
    with pytest.raises(ShapeError):
        patch_embed(np.zeros((1, 30, 28, 1)), w, np.zeros(8), 4)


def test_patch_embed_identity_reorders_pixels():
    img = np.arange(2 * 4 * 4 * 1, dtype=float).reshape(2, 4, 4, 1)
    out, _ = patch_embed(img, np.eye(4), np.zeros(4), 2)
    assert out.shape == (2, 2, 2, 4)
    np.testing.assert_array_equal(out[0, 1, 0], [img[0, 2, 0, 0], img[0, 2, 1, 0], img[0, 3, 0, 0], img[0, 3, 1, 0]])
    assert sorted(out.ravel()) == sorted(img.ravel())


def test_patch_merge_contract():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 8, 3))
    out, _ = patch_merge(x, rng.standard_normal((12, 5)), np.zeros(5))
    assert out.shape == (2, 4, 4, 5)
    ident, _ = patch_merge(x, np.eye(12), np.zeros(12))
    assert sorted(ident.ravel()) == sorted(x.ravel())
    zero, _ = patch_merge(np.zeros((1, 4, 4, 3)), rng.standard_normal((12, 5)), np.zeros(5))
    assert not zero.any()
    with pytest.raises(ShapeError):
        patch_merge(np.zeros((1, 5, 4, 3)), np.eye(12), np.zeros(12))


# ---------------------------------------------------------------- mixer


def test_allpass_is_identity_with_zero_dswg_grads():
    p = block_params()
    x = np.random.default_rng(2).standard_normal((3, 6, 6, 4))
    out, cache = dsm_mix(x, p, "allpass")
    assert np.abs(out - x).max() < 1e-9
    _, dswg_grads = dsm_mix_backward(cache, p, np.random.default_rng(3).standard_normal(out.shape))
    assert dswg_grads is None
    _, c = block_forward(x, p, "allpass")
    _, grads = block_backward(c, p, np.ones_like(x))
    for name in ("w1", "b1", "w2", "b2", "ln_scale", "ln_shift"):
        assert not grads[f"dswg.{name}"].any()


def test_constant_channel_stays_constant():
    p = block_params()
    x = np.ones((1, 6, 6, 4)) * np.array([0.5, -1.0, 2.0, 3.0])
    out, _ = dsm_mix(x, p, "dynamic")
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1, :], out.shape), atol=1e-12)


def test_frozen_mask_linearity():
    p = block_params()
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((2, 2, 6, 6, 4))
    _, cache = dsm_mix(x, p, "dynamic")
    masks = cache.mask
    fx, _ = dsm_mix(x, p, "dynamic", masks=masks)
    fy, _ = dsm_mix(y, p, "dynamic", masks=masks)
    f2, _ = dsm_mix(2.5 * x - 0.5 * y, p, "dynamic", masks=masks)
    np.testing.assert_allclose(f2, 2.5 * fx - 0.5 * fy, atol=1e-9)


def test_random_mode_uses_frozen_positive_mask():
    p = block_params()
    x = np.random.default_rng(5).standard_normal((1, 6, 6, 4))
    a, ca = dsm_mix(x, p, "random")
    b, _ = dsm_mix(x, p, "random")
    assert np.array_equal(a, b)
    assert (ca.mask > 0).all() and ca.mask.shape == (4, 6, 6)


def test_mix_errors():
    p = block_params()
    with pytest.raises(InvalidArgumentError):
        dsm_mix(np.zeros((1, 6, 6, 4)), p, "bogus")
    bad = np.zeros((1, 6, 6, 4))
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        dsm_mix(bad, p, "dynamic")
    with pytest.raises(ConfigError):
        dsm_mix(np.zeros((1, 2, 2, 4)), p, "dynamic")  # l=8 > 4 bands


# ---------------------------------------------------------------- block


def test_block_with_zero_mlp_and_allpass():
    p = block_params(mlp_zero=True)
    x = np.random.default_rng(6).standard_normal((2, 6, 6, 4))
    z, _ = block_forward(x, p, "allpass")
    mu = x.mean(-1, keepdims=True)
    ln1 = (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * p.ln1_scale + p.ln1_shift
    np.testing.assert_allclose(z, x + ln1, atol=1e-9)


@pytest.mark.parametrize("mode", ["dynamic", "allpass", "random"])
def test_block_finite_differences(mode):
    rng = np.random.default_rng(7)
    p = block_params(C=4, r=2, l=8, K=16)
    x = rng.standard_normal((2, 6, 6, 4))
    G = rng.standard_normal(x.shape)

    def f():
        return float((G * block_forward(x, p, mode)[0]).sum())

    z, cache = block_forward(x, p, mode)
    assert z.shape == x.shape
    gx, grads = block_backward(cache, p, G)
    targets = [("x", x, gx), ("mlp.w1", p.mlp_w1, grads["mlp.w1"]), ("ln1.scale", p.ln1_scale, grads["ln1.scale"]),
               ("ln2.shift", p.ln2_shift, grads["ln2.shift"]), ("mlp.b2", p.mlp_b2, grads["mlp.b2"])]
    if mode == "dynamic":
        targets += [("dswg.w1", p.dswg.w1, grads["dswg.w1"]), ("dswg.b2", p.dswg.b2, grads["dswg.b2"]),
                    ("dswg.ln_scale", p.dswg.ln_scale, grads["dswg.ln_scale"])]
    worst = 0.0
    for _, arr, g in targets:
        flat = rng.choice(arr.size, size=min(arr.size, 25), replace=False)
        for i in flat:
            idx = np.unravel_index(i, arr.shape)
            worst = max(worst, float(rel_error(g[idx], central_difference(f, arr, idx))))
    assert worst < 1e-4


# ---------------------------------------------------------------- model


def test_logits_shape_and_determinism():
    cfg = ModelConfig.preset("dsm-s-desk")
    model = DSMModel.create(cfg, seed=0)
    x = np.random.default_rng(8).uniform(size=(3, 32, 32, 1))
    a, _ = model_forward(model, x)
    b, _ = model_forward(model, x)
    assert a.shape == (3, 10)
    assert np.array_equal(a, b)
    again = DSMModel.create(cfg, seed=0)
    assert all(np.array_equal(model.params[k], again.params[k]) for k in model.params)


def test_batch_permutation_equivariance():
    cfg = tiny_config()
    model = DSMModel.create(cfg, seed=1)
    x = np.random.default_rng(9).uniform(size=(5, 16, 16, 1))
    perm = np.array([3, 0, 4, 1, 2])
    a, _ = model_forward(model, x)
    b, _ = model_forward(model, x[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_zero_grad_logits_give_zero_grads():
    model = DSMModel.create(tiny_config(), seed=2)
    logits, tape = model_forward(model, np.random.default_rng(0).uniform(size=(2, 16, 16, 1)))
    grads = model_backward(tape, np.zeros_like(logits))
    assert set(grads) == set(model.params)
    assert all(not g.any() for g in grads.values())


def test_stale_tape_rejected():
    model = DSMModel.create(tiny_config(), seed=2)
    logits, tape = model_forward(model, np.zeros((1, 16, 16, 1)))
    model.mark_updated()
    with pytest.raises(InvalidStateError):
        model_backward(tape, np.zeros_like(logits))


@pytest.mark.parametrize("mode", ["dynamic", "allpass", "random"])
def test_model_finite_differences(mode):
    result = check_model(tiny_config(mode=mode), coordinates=120, seed=3)
    assert result.max_rel_error < 1e-3, result


def test_allpass_model_gives_dswg_no_gradient():
    cfg = tiny_config(mode="allpass")
    model = DSMModel.create(cfg, seed=4)
    logits, tape = model_forward(model, np.random.default_rng(1).uniform(size=(2, 16, 16, 1)))
    grads = model_backward(tape, np.ones_like(logits))
    dswg = [k for k in grads if ".dswg." in k]
    assert dswg and all(not grads[k].any() for k in dswg)


def test_init_identical_across_modes():
    base = DSMModel.create(tiny_config(), seed=5)
    for mode in ("allpass", "random"):
        other = DSMModel.create(tiny_config(mode=mode), seed=5)
        assert all(np.array_equal(base.params[k], other.params[k]) for k in base.params)


# ---------------------------------------------------------------- config and accounting


def test_stage_shapes_and_validation():
    cfg = ModelConfig.preset("dsm-s-desk")
    assert cfg.stage_shapes() == [(8, 8, 32), (4, 4, 64), (2, 2, 128), (1, 1, 256)]
    assert [cfg.stage_bands(s) for s in range(4)] == [16, 16, 4, 1]
    with pytest.raises(ConfigError, match="spectrum_length"):
        replace(cfg, spectrum_length=65).stage_shapes()
    with pytest.raises(ConfigError):
        replace(cfg, image_height=28, image_width=28).stage_shapes()  # 7x7 cannot halve
    with pytest.raises(ConfigError):
        replace(cfg, widths=(64, 32, 128, 256)).stage_shapes()
    with pytest.raises(ConfigError):
        ModelConfig.preset("dsm-xl")


def test_presets_scale_widths():
    s, m, l = (ModelConfig.preset(v).widths for v in ("dsm-s-desk", "dsm-m-desk", "dsm-l-desk"))
    assert m == tuple(int(1.5 * w) for w in s)
    assert l == tuple(2 * w for w in s)


def test_param_count_matches_model():
    for cfg in (ModelConfig.preset("dsm-s-desk"), tiny_config(), ModelConfig.preset("dsm-m-desk", spectrum_length=8)):
        assert count_params_flops(cfg)["params"] == DSMModel.create(cfg).num_params()


def test_flop_report_accounting():
    cfg = ModelConfig.preset("dsm-s-desk")
    rep = count_params_flops(cfg)
    assert rep["params"] == sum(s["params"] for s in rep["stages"])
    assert rep["muladds"] == sum(s["muladds"] for s in rep["stages"])
    for s in rep["stages"]:
        assert s["muladds"] == sum(s["muladd_breakdown"].values())
        K, l, C, d = cfg.hidden, s["l"], s["C"], cfg.depths[s["stage"]]
        assert s["muladd_breakdown"]["dswg"] == d * C * (dswg_muladds(l, K) + 4 * l)


def test_doubling_channels_doubles_transform_cost():
    a = count_params_flops(ModelConfig.preset("dsm-s-desk"))
    b = count_params_flops(ModelConfig.preset("dsm-s-desk", widths=tuple(2 * w for w in (32, 64, 128, 256))))
    for sa, sb in zip(a["stages"], b["stages"]):
        for key in ("dct", "modulation", "dswg"):
            assert sb["muladd_breakdown"][key] == 2 * sa["muladd_breakdown"][key]
