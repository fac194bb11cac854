"""Central-difference gradient checks for the DSWG and the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dswg import PARAM_NAMES, dswg_backward, generate_mask, init_dswg_params
from .model import DSMModel, ModelConfig, model_backward, model_forward
from .spectral import zigzag_order
from .train import cross_entropy


def rel_error(analytic, numeric, floor: float = 1e-10) -> np.ndarray:
    """|a - n| / max(|a|, |n|), with ``floor`` guarding exact zeros."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, x: np.ndarray, index, eps: float = 1e-5) -> float:
    """(f(x + eps e_i) - f(x - eps e_i)) / 2 eps, restoring ``x[index]`` afterwards."""
    old = x[index]
    x[index] = old + eps
    up = f()
    x[index] = old - eps
    down = f()
    x[index] = old
    return (up - down) / (2.0 * eps)


@dataclass
class GradCheck:
    max_rel_error: float
    coordinates: int
    worst: str

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_dswg(l=8, K=16, H=6, W=6, channels=2, seed=0, eps=1e-5) -> GradCheck:
    """Every spectrum and parameter coordinate of a random DSWG instance.

    The scalar under test is <G, mask> for a fixed random G, so the check
    covers the full Jacobian contracted with a generic direction.
    """
    rng = np.random.default_rng(seed)
    p = init_dswg_params(l, K, rng)
    # non-trivial norm parameters and biases so every path carries signal
    p.ln_scale[:] = rng.uniform(0.5, 1.5, l)
    p.ln_shift[:] = rng.normal(0, 0.3, l)
    p.b1[:] = rng.normal(0, 0.3, K)
    p.b2[:] = rng.normal(0, 0.3, l)
    order = zigzag_order(H, W)
    spectrum = rng.standard_normal((channels, H, W))
    G = rng.standard_normal((channels, H, W))

    def f():
        mask, _ = generate_mask(spectrum, order, p)
        return float((G * mask).sum())

    _, act = generate_mask(spectrum, order, p)
    g_spec, grads = dswg_backward(act, G, p)
    targets = [("spectrum", spectrum, g_spec)] + [(n, getattr(p, n), grads[n]) for n in PARAM_NAMES]
    worst, count, where = 0.0, 0, ""
    for name, arr, g in targets:
        for idx in np.ndindex(arr.shape):
            err = float(rel_error(g[idx], central_difference(f, arr, idx, eps)))
            count += 1
            if err > worst:
                worst, where = err, f"{name}{[int(i) for i in idx]}"
    return GradCheck(worst, count, where)


def tiny_config(**overrides) -> ModelConfig:
    """Two stages, one block each, widths 8 and 16, 16x16 single-channel input."""
    base = dict(depths=(1, 1), widths=(8, 16), image_height=16, image_width=16,
                spectrum_length=8, hidden=8, num_classes=4)
    return ModelConfig.preset("dsm-s-desk", **{**base, **overrides})


def check_model(cfg: ModelConfig = None, coordinates=256, batch=3, seed=0, eps=1e-5) -> GradCheck:
    """Sampled parameter coordinates of the cross-entropy loss on a random batch.

    Coordinates are spread over every parameter tensor (at least one each)
    and the rest drawn in proportion to tensor size.
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    model = DSMModel.create(cfg, seed=seed)
    for name, p in model.params.items():  # move norms/biases off their trivial init
        if p.ndim == 1:
            p += rng.normal(0, 0.1, p.shape)
    images = rng.uniform(0, 1, (batch, cfg.image_height, cfg.image_width, cfg.in_channels))
    labels = rng.integers(cfg.num_classes, size=batch)

    def loss():
        logits, _ = model_forward(model, images)
        return cross_entropy(logits, labels)[0]

    logits, tape = model_forward(model, images)
    grads = model_backward(tape, cross_entropy(logits, labels)[1])

    names = sorted(model.params)
    sizes = np.array([model.params[n].size for n in names], dtype=float)
    picks = [(n, int(rng.integers(model.params[n].size))) for n in names]
    extra = max(0, coordinates - len(picks))
    for i in rng.choice(len(names), size=extra, p=sizes / sizes.sum()):
        picks.append((names[i], int(rng.integers(model.params[names[i]].size))))

    worst, where = 0.0, ""
    for name, flat in picks:
        arr = model.params[name]
        idx = np.unravel_index(flat, arr.shape)
        err = float(rel_error(grads[name][idx], central_difference(loss, arr, idx, eps)))
        if err > worst:
            worst, where = err, f"{name}{[int(i) for i in idx]}"
    return GradCheck(worst, len(picks), where)
