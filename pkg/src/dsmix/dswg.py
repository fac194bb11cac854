"""Dynamic spectrum weights generator.

Turns one channel's DCT spectrum into a multiplicative mask over the same
grid: zigzag flatten, average-pool to ``l`` bands, LayerNorm, FC -> GELU ->
FC, softmax over the bands, then replicate each band weight back over the
zigzag window it was pooled from. One parameter record serves every channel;
all functions broadcast over leading axes so a ``(B, C, H, W)`` spectrum
stack is handled in a single call.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .errors import InvalidArgumentError, InvalidStateError, NumericError, ShapeError
from .spectral import SpectrumGrid, ZigzagOrder, zigzag_flatten, zigzag_unflatten

LN_EPS = 1e-5
PARAM_NAMES = ("ln_scale", "ln_shift", "w1", "b1", "w2", "b2")


@dataclass(eq=False)
class DSWGParams:
    l: int
    K: int
    ln_scale: np.ndarray
    ln_shift: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    mask_gain: float = 1.0
    truncate_to: Optional[int] = None

    def __post_init__(self):
        if self.l < 1 or self.K < 1:
            raise InvalidArgumentError(f"l and K must be >= 1, got l={self.l}, K={self.K}")
        expected = {
            "ln_scale": (self.l,),
            "ln_shift": (self.l,),
            "w1": (self.K, self.l),
            "b1": (self.K,),
            "w2": (self.l, self.K),
            "b2": (self.l,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
        if not self.mask_gain > 0:
            raise InvalidArgumentError(f"mask_gain must be positive, got {self.mask_gain}")

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_tensors(cls, tensors, mask_gain=1.0, truncate_to=None) -> "DSWGParams":
        w1 = tensors["w1"]
        return cls(
            l=w1.shape[1],
            K=w1.shape[0],
            mask_gain=mask_gain,
            truncate_to=truncate_to,
            **{name: tensors[name] for name in PARAM_NAMES},
        )


def init_dswg_params(l, K, rng, mask_gain=1.0, truncate_to=None) -> DSWGParams:
    """Uniform(+-1/sqrt(fan_in)) FC weights, zero biases, identity LayerNorm."""
    b1_, b2_ = 1.0 / np.sqrt(l), 1.0 / np.sqrt(K)
    return DSWGParams(
        l=l,
        K=K,
        ln_scale=np.ones(l),
        ln_shift=np.zeros(l),
        w1=rng.uniform(-b1_, b1_, size=(K, l)),
        b1=np.zeros(K),
        w2=rng.uniform(-b2_, b2_, size=(l, K)),
        b2=np.zeros(l),
        mask_gain=mask_gain,
        truncate_to=truncate_to,
    )


@functools.lru_cache(maxsize=128)
def _windows(n: int, l: int):
    """Pooling matrix (l, n) and its replication matrix (n, l)."""
    bounds = np.arange(l + 1) * n // l
    index = np.repeat(np.arange(l), np.diff(bounds))
    replicate = np.zeros((n, l))
    replicate[np.arange(n), index] = 1.0
    pool = (replicate / np.diff(bounds)).T.copy()
    pool.setflags(write=False)
    replicate.setflags(write=False)
    return pool, replicate


def pool_spectrum(e, l: int) -> np.ndarray:
    """Adaptive average pooling of the trailing axis down to ``l`` windows."""
    e = np.asarray(e, dtype=np.float64)
    n = e.shape[-1]
    if l < 1 or l > n:
        raise InvalidArgumentError(f"pooled length l={l} must lie in [1, {n}]")
    pool, _ = _windows(n, l)
    return e @ pool.T


def layer_norm(x, scale, shift, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * scale + shift, xhat, inv_std


def layer_norm_backward(grad_y, xhat, inv_std, scale):
    """Returns (grad_x, grad_scale, grad_shift); parameter grads summed over leading axes."""
    lead = tuple(range(grad_y.ndim - 1))
    grad_scale = (grad_y * xhat).sum(axis=lead)
    grad_shift = grad_y.sum(axis=lead)
    g = grad_y * scale
    grad_x = inv_std * (
        g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
    )
    return grad_x, grad_scale, grad_shift


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    return x * ndtr(x)


def gelu_forward(x):
    """GELU output plus Phi(x), which the backward pass reuses."""
    phi = ndtr(x)
    return x * phi, phi


def gelu_grad(x, phi=None):
    if phi is None:
        phi = ndtr(x)
    return phi + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _check_len(e_pooled, p):
    if e_pooled.shape[-1] != p.l:
        raise ShapeError(f"pooled embedding has length {e_pooled.shape[-1]}, params expect {p.l}")


def _attention_forward(e_pooled, p: DSWGParams):
    _check_len(e_pooled, p)
    y, xhat, inv_std = layer_norm(e_pooled, p.ln_scale, p.ln_shift)
    h = y @ p.w1.T + p.b1
    a, phi = gelu_forward(h)
    s = a @ p.w2.T + p.b2
    if not np.isfinite(s).all():
        raise NumericError("non-finite band logits")
    return s, (xhat, inv_std, y, h, a, phi)


def band_attention(e_pooled, p: DSWGParams) -> np.ndarray:
    """Band logits ``w2 @ gelu(w1 @ LN(e) + b1) + b2``."""
    s, _ = _attention_forward(np.asarray(e_pooled, dtype=np.float64), p)
    return s


def normalize_weights(s) -> np.ndarray:
    """Softmax over the trailing axis, max-shifted for stability."""
    s = np.asarray(s, dtype=np.float64)
    if not np.isfinite(s).all():
        raise NumericError("softmax input contains non-finite values")
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out, out):
    """Vector-Jacobian product with ``diag(out) - out out^T``."""
    return out * (grad_out - (grad_out * out).sum(axis=-1, keepdims=True))


def expand_weights(s_hat, order: ZigzagOrder, mask_gain: float = 1.0) -> np.ndarray:
    """Replicate band weights over their pooling windows and un-zigzag."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    l = s_hat.shape[-1]
    if l > order.size:
        raise ShapeError(f"{l} band weights cannot cover a {order.H}x{order.W} grid")
    _, replicate = _windows(order.size, l)
    return zigzag_unflatten(order, mask_gain * (s_hat @ replicate.T))


@dataclass(eq=False)
class DSWGActivation:
    """Forward intermediates kept for :func:`dswg_backward`."""

    e: np.ndarray
    e_pooled: np.ndarray
    s: np.ndarray
    s_hat: np.ndarray
    mask: np.ndarray
    order: ZigzagOrder = field(repr=False)
    params: DSWGParams = field(repr=False)
    cache: tuple = field(repr=False, default=())


def _truncate(e, cutoff):
    if cutoff is None or cutoff >= e.shape[-1]:
        return e
    e = e.copy()
    e[..., cutoff:] = 0.0
    return e


def generate_mask(spectrum, order: ZigzagOrder, p: DSWGParams):
    """Mask for each trailing ``H x W`` spectrum; returns ``(mask, activation)``."""
    data = spectrum.data if isinstance(spectrum, SpectrumGrid) else np.asarray(spectrum, dtype=np.float64)
    if p.l > order.size:
        raise InvalidArgumentError(f"l={p.l} exceeds the {order.size} available bands")
    e = _truncate(zigzag_flatten(order, data), p.truncate_to)
    e_pooled = pool_spectrum(e, p.l)
    s, cache = _attention_forward(e_pooled, p)
    s_hat = normalize_weights(s)
    mask = expand_weights(s_hat, order, p.mask_gain)
    act = DSWGActivation(e=e, e_pooled=e_pooled, s=s, s_hat=s_hat, mask=mask,
                         order=order, params=p, cache=cache)
    return mask, act


def dswg_backward(act: DSWGActivation, grad_mask, p: DSWGParams):
    """Reverse-mode pass through :func:`generate_mask`.

    Returns ``(grad_spectrum, grads)`` where ``grads`` maps each parameter
    name to its gradient summed over every leading (batch/channel) axis.
    """
    if act.params is not p:
        raise InvalidStateError("activation was produced with a different parameter record")
    grad_mask = np.asarray(grad_mask, dtype=np.float64)
    if grad_mask.shape != act.mask.shape:
        raise ShapeError(f"grad_mask shape {grad_mask.shape} != mask shape {act.mask.shape}")
    order = act.order
    pool, replicate = _windows(order.size, p.l)
    xhat, inv_std, y, h, a, phi = act.cache
    lead = tuple(range(grad_mask.ndim - 2))

    grad_s_hat = p.mask_gain * (zigzag_flatten(order, grad_mask) @ replicate)
    grad_s = softmax_backward(grad_s_hat, act.s_hat)
    grads = {
        "w2": np.tensordot(grad_s, a, axes=(lead, lead)),
        "b2": grad_s.sum(axis=lead),
    }
    grad_h = (grad_s @ p.w2) * gelu_grad(h, phi)
    grads["w1"] = np.tensordot(grad_h, y, axes=(lead, lead))
    grads["b1"] = grad_h.sum(axis=lead)
    grad_pooled, grads["ln_scale"], grads["ln_shift"] = layer_norm_backward(
        grad_h @ p.w1, xhat, inv_std, p.ln_scale
    )
    grad_e = _truncate(grad_pooled @ pool, p.truncate_to)
    return zigzag_unflatten(order, grad_e), grads


def dswg_muladds(l: int, K: int) -> int:
    """Multiply-adds of the two FC layers (weights plus biases) for one channel."""
    return 2 * K * l + K + l


def dswg_op_count(p: DSWGParams) -> int:
    """Multiply-adds implied by the actual parameter shapes of ``p``."""
    return p.w1.size + p.b1.size + p.w2.size + p.b2.size
