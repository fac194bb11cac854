"""DSM backbone: patch embedding, DCT token-mixing blocks, hierarchical stages.

Tokens are kept channels-last, ``(B, H, W, C)``. Parameters live in one flat
``dict`` keyed by dotted names so the optimizer, checkpoints and gradient
checks can treat the model as a bag of named arrays. Every forward function
returns ``(output, cache)`` and has a matching backward that consumes the
cache; the DCT's backward is its adjoint, which for an orthonormal transform
is the opposite transform.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import dswg as dswg_mod
from .dswg import DSWGParams, gelu_forward, gelu_grad, layer_norm, layer_norm_backward
from .errors import ConfigError, InvalidArgumentError, InvalidStateError, NumericError, ShapeError
from .spectral import dct2, get_plan, get_zigzag, idct2

MODES = ("dynamic", "allpass", "random")

PRESETS = {
    "dsm-s-desk": dict(depths=(2, 2, 4, 2), widths=(32, 64, 128, 256)),
    "dsm-m-desk": dict(depths=(2, 2, 4, 2), widths=(48, 96, 192, 384)),
    "dsm-l-desk": dict(depths=(2, 2, 4, 2), widths=(64, 128, 256, 512)),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dsm-s-desk"
    image_height: int = 32
    image_width: int = 32
    in_channels: int = 1
    patch_size: int = 4
    pixel_mean: float = 0.5
    pixel_std: float = 0.25
    depths: tuple = PRESETS["dsm-s-desk"]["depths"]
    widths: tuple = PRESETS["dsm-s-desk"]["widths"]
    spectrum_length: int = 16
    hidden: int = 32
    mask_gain: float = 1.0
    truncate_to: Optional[int] = None
    mlp_ratio: int = 4
    num_classes: int = 10
    mode: str = "dynamic"
    resample_random: bool = False

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @classmethod
    def preset(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in PRESETS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(PRESETS)}", key="variant")
        return cls(variant=variant, **{**PRESETS[variant], **overrides})

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """(H, W, C) of every stage, after validating the shape algebra."""
        validate_model_config(self)
        H, W = self.image_height // self.patch_size, self.image_width // self.patch_size
        shapes = []
        for s, C in enumerate(self.widths):
            if s > 0:
                H, W = H // 2, W // 2
            shapes.append((H, W, C))
        return shapes

    def stage_bands(self, s: int) -> int:
        """Pooled band count at stage ``s``; deeper stages clamp to their grid size."""
        H, W, _ = self.stage_shapes()[s]
        return min(self.spectrum_length, H * W)


def validate_model_config(cfg: ModelConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(msg, key=key)

    for key in ("image_height", "image_width", "in_channels", "patch_size",
                "spectrum_length", "hidden", "mlp_ratio", "num_classes"):
        v = getattr(cfg, key)
        need(isinstance(v, int) and v >= 1, key, f"must be an integer >= 1, got {v!r}")
    need(cfg.mode in MODES, "mode", f"must be one of {MODES}, got {cfg.mode!r}")
    need(len(cfg.depths) == len(cfg.widths) and len(cfg.depths) >= 1, "depths",
         "depths and widths must have the same non-zero length")
    need(all(d >= 1 for d in cfg.depths), "depths", "every stage depth must be >= 1")
    need(all(w >= 1 for w in cfg.widths), "widths", "every stage width must be >= 1")
    need(all(a <= b for a, b in zip(cfg.widths, cfg.widths[1:])), "widths",
         f"stage widths must be non-decreasing, got {cfg.widths}")
    need(cfg.mask_gain > 0, "mask_gain", "must be positive")
    need(cfg.pixel_std > 0, "pixel_std", "must be positive")
    need(cfg.truncate_to is None or cfg.truncate_to >= 1, "truncate_to", "must be >= 1")
    p = cfg.patch_size
    need(cfg.image_height % p == 0 and cfg.image_width % p == 0, "patch_size",
         f"image {cfg.image_height}x{cfg.image_width} is not divisible by patch {p}")
    H, W = cfg.image_height // p, cfg.image_width // p
    need(cfg.spectrum_length <= H * W, "spectrum_length",
         f"l={cfg.spectrum_length} exceeds the {H}x{W}={H * W} first-stage bands")
    for s in range(1, len(cfg.widths)):
        need(H % 2 == 0 and W % 2 == 0, "depths",
             f"stage {s} cannot halve a {H}x{W} grid; use a larger image or fewer stages")
        H, W = H // 2, W // 2


# ---------------------------------------------------------------- primitives


def linear(x, w, b):
    return x @ w + b, x


def linear_backward(x, w, grad_out):
    lead = tuple(range(grad_out.ndim - 1))
    return grad_out @ w.T, np.tensordot(x, grad_out, axes=(lead, lead)), grad_out.sum(axis=lead)


def _uniform_linear(rng, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


# ---------------------------------------------------------------- patches


def _to_patches(x, p):
    B, H, W, C = x.shape
    x = x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * C)


def _from_patches(x, p, C):
    B, Hp, Wp, _ = x.shape
    x = x.reshape(B, Hp, Wp, p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, Hp * p, Wp * p, C)


def patch_embed(images, w, b, patch_size):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected B x H x W x C images, got shape {images.shape}")
    _, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {patch_size}")
    if w.shape[0] != patch_size * patch_size * C:
        raise ShapeError(f"projection expects {w.shape[0]} inputs per patch, got {patch_size ** 2 * C}")
    return linear(_to_patches(images, patch_size), w, b)


def patch_merge(x, w, b):
    """Concatenate 2x2 neighbourhoods (4C) and project; halves H and W."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"patch merge needs even H and W, got {H}x{W}")
    return linear(_to_patches(x, 2), w, b)


def patch_merge_backward(cache, w, grad_out, C):
    grad_in, gw, gb = linear_backward(cache, w, grad_out)
    return _from_patches(grad_in, 2, C), gw, gb


# ---------------------------------------------------------------- mixer


@dataclass(eq=False)
class DSMBlockParams:
    """Views into the model's parameter dict for one block."""

    dswg: DSWGParams
    ln1_scale: np.ndarray
    ln1_shift: np.ndarray
    ln2_scale: np.ndarray
    ln2_shift: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    random_mask: Optional[np.ndarray] = None


@dataclass(eq=False)
class MixCache:
    spectrum: np.ndarray
    mask: np.ndarray
    mode: str
    activation: Optional[dswg_mod.DSWGActivation] = None


def dsm_mix(x, p: DSMBlockParams, mode="dynamic", masks=None):
    """DCT -> spectrum * mask -> IDCT on every channel of ``x`` (B, H, W, C).

    ``masks`` replays previously captured masks as constants, which makes
    the mixer a plain linear operator on ``x``.
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mixing mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("token tensor contains non-finite values")
    _, H, W, C = x.shape
    plan = get_plan(H, W)
    spectrum = dct2(plan, x.transpose(0, 3, 1, 2))
    activation = None
    if masks is not None:
        mask = np.asarray(masks, dtype=np.float64)
    elif mode == "dynamic":
        if p.dswg.l > H * W:
            raise ConfigError(f"l={p.dswg.l} exceeds {H}x{W} spectrum bands", key="spectrum_length")
        mask, activation = dswg_mod.generate_mask(spectrum, get_zigzag(H, W), p.dswg)
    elif mode == "allpass":
        mask = np.ones((H, W))
    else:
        if p.random_mask is None or p.random_mask.shape != (C, H, W):
            raise ShapeError(f"random mode needs a ({C}, {H}, {W}) mask buffer")
        mask = p.random_mask
    out = idct2(plan, spectrum * mask).transpose(0, 2, 3, 1)
    return out, MixCache(spectrum=spectrum, mask=mask, mode=mode, activation=activation)


def dsm_mix_backward(cache: MixCache, p: DSMBlockParams, grad_out):
    """Returns (grad_x, dswg_grads or None)."""
    H, W = cache.spectrum.shape[-2:]
    plan = get_plan(H, W)
    g = dct2(plan, grad_out.transpose(0, 3, 1, 2))
    grad_spec = g * cache.mask
    dswg_grads = None
    if cache.activation is not None:
        g_spec2, dswg_grads = dswg_mod.dswg_backward(cache.activation, g * cache.spectrum, p.dswg)
        grad_spec = grad_spec + g_spec2
    return idct2(plan, grad_spec).transpose(0, 2, 3, 1), dswg_grads


def block_forward(x, p: DSMBlockParams, mode="dynamic"):
    """Pre-norm residual block: spectral mixer, then channel MLP."""
    n1, xhat1, inv1 = layer_norm(x, p.ln1_scale, p.ln1_shift)
    mixed, mix_cache = dsm_mix(n1, p, mode)
    y = x + mixed
    n2, xhat2, inv2 = layer_norm(y, p.ln2_scale, p.ln2_shift)
    h = n2 @ p.mlp_w1 + p.mlp_b1
    a, phi = gelu_forward(h)
    z = y + a @ p.mlp_w2 + p.mlp_b2
    return z, (xhat1, inv1, mix_cache, xhat2, inv2, n2, h, a, phi)


def block_backward(cache, p: DSMBlockParams, grad_z):
    xhat1, inv1, mix_cache, xhat2, inv2, n2, h, a, phi = cache
    grads = {}
    grad_a, grads["mlp.w2"], grads["mlp.b2"] = linear_backward(a, p.mlp_w2, grad_z)
    grad_h = grad_a * gelu_grad(h, phi)
    grad_n2, grads["mlp.w1"], grads["mlp.b1"] = linear_backward(n2, p.mlp_w1, grad_h)
    g, grads["ln2.scale"], grads["ln2.shift"] = layer_norm_backward(grad_n2, xhat2, inv2, p.ln2_scale)
    grad_y = grad_z + g
    grad_n1, dswg_grads = dsm_mix_backward(mix_cache, p, grad_y)
    g, grads["ln1.scale"], grads["ln1.shift"] = layer_norm_backward(grad_n1, xhat1, inv1, p.ln1_scale)
    for name in dswg_mod.PARAM_NAMES:
        grads[f"dswg.{name}"] = (dswg_grads[name] if dswg_grads is not None
                                 else np.zeros_like(getattr(p.dswg, name)))
    return grad_y + g, grads


# ---------------------------------------------------------------- model


def _block_prefix(s, b):
    return f"stages.{s}.blocks.{b}"


def _stream(seed, name, purpose=0):
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, purpose, key])))


def init_params(cfg: ModelConfig, seed: int = 0):
    """Fresh ``(params, buffers)``.

    Every tensor is drawn from its own Philox stream keyed by (seed, name),
    so changing one block's shape leaves every other tensor untouched.
    Random-mode masks are always created, which keeps trainable parameters
    bitwise identical across mixing modes.
    """
    shapes = cfg.stage_shapes()
    params, buffers = {}, {}

    def add_linear(name, fan_in, fan_out):
        params[f"{name}.w"], params[f"{name}.b"] = _uniform_linear(_stream(seed, name), fan_in, fan_out)

    p = cfg.patch_size
    add_linear("stem", p * p * cfg.in_channels, cfg.widths[0])
    prev_c = cfg.widths[0]
    for s, (H, W, C) in enumerate(shapes):
        if s > 0:
            add_linear(f"stages.{s}.merge", 4 * prev_c, C)
        l = cfg.stage_bands(s)
        for b in range(cfg.depths[s]):
            pre = _block_prefix(s, b)
            params[f"{pre}.ln1.scale"], params[f"{pre}.ln1.shift"] = np.ones(C), np.zeros(C)
            d = dswg_mod.init_dswg_params(l, cfg.hidden, _stream(seed, f"{pre}.dswg"))
            for name, arr in d.tensors().items():
                params[f"{pre}.dswg.{name}"] = arr
            params[f"{pre}.ln2.scale"], params[f"{pre}.ln2.shift"] = np.ones(C), np.zeros(C)
            params[f"{pre}.mlp.w1"], params[f"{pre}.mlp.b1"] = _uniform_linear(
                _stream(seed, f"{pre}.mlp.fc1"), C, cfg.mlp_ratio * C)
            params[f"{pre}.mlp.w2"], params[f"{pre}.mlp.b2"] = _uniform_linear(
                _stream(seed, f"{pre}.mlp.fc2"), cfg.mlp_ratio * C, C)
            buffers[f"{pre}.random_mask"] = _stream(seed, pre, purpose=1).uniform(0.0, 1.0, size=(C, H, W))
        prev_c = C
    params["norm.scale"], params["norm.shift"] = np.ones(prev_c), np.zeros(prev_c)
    add_linear("head", prev_c, cfg.num_classes)
    return params, buffers


@dataclass(eq=False)
class DSMModel:
    cfg: ModelConfig
    params: dict
    buffers: dict = field(default_factory=dict)
    version: int = 0

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "DSMModel":
        params, buffers = init_params(cfg, seed)
        return cls(cfg=cfg, params=params, buffers=buffers)

    def mark_updated(self):
        """Call after mutating parameters; invalidates outstanding tapes."""
        self.version += 1

    def block(self, s: int, b: int) -> DSMBlockParams:
        pre = _block_prefix(s, b)
        P = self.params
        d = DSWGParams.from_tensors(
            {name: P[f"{pre}.dswg.{name}"] for name in dswg_mod.PARAM_NAMES},
            mask_gain=self.cfg.mask_gain,
            truncate_to=self.cfg.truncate_to,
        )
        return DSMBlockParams(
            dswg=d,
            ln1_scale=P[f"{pre}.ln1.scale"], ln1_shift=P[f"{pre}.ln1.shift"],
            ln2_scale=P[f"{pre}.ln2.scale"], ln2_shift=P[f"{pre}.ln2.shift"],
            mlp_w1=P[f"{pre}.mlp.w1"], mlp_b1=P[f"{pre}.mlp.b1"],
            mlp_w2=P[f"{pre}.mlp.w2"], mlp_b2=P[f"{pre}.mlp.b2"],
            random_mask=self.buffers.get(f"{pre}.random_mask"),
        )

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(eq=False)
class Tape:
    model: DSMModel
    version: int
    mode: str
    entries: list


def model_forward(model: DSMModel, images, mode: Optional[str] = None):
    """Logits ``(B, num_classes)`` and the tape needed by :func:`model_backward`."""
    cfg, P = model.cfg, model.params
    mode = mode or cfg.mode
    images = (np.asarray(images, dtype=np.float64) - cfg.pixel_mean) / cfg.pixel_std
    x, stem_cache = patch_embed(images, P["stem.w"], P["stem.b"], cfg.patch_size)
    entries = [("stem", stem_cache)]
    for s in range(len(cfg.widths)):
        if s > 0:
            C = x.shape[-1]
            x, c = patch_merge(x, P[f"stages.{s}.merge.w"], P[f"stages.{s}.merge.b"])
            entries.append(("merge", s, c, C))
        for b in range(cfg.depths[s]):
            bp = model.block(s, b)
            x, c = block_forward(x, bp, mode)
            entries.append(("block", s, b, bp, c))
    n_tokens = x.shape[1] * x.shape[2]
    pooled = x.mean(axis=(1, 2))
    normed, xhat, inv = layer_norm(pooled, P["norm.scale"], P["norm.shift"])
    logits = normed @ P["head.w"] + P["head.b"]
    entries.append(("head", x.shape, n_tokens, xhat, inv, normed))
    return logits, Tape(model=model, version=model.version, mode=mode, entries=entries)


def model_backward(tape: Tape, grad_logits):
    """Gradient for every parameter name (zeros where a parameter is unused)."""
    model = tape.model
    if tape.version != model.version:
        raise InvalidStateError("tape is stale: parameters changed since the forward pass")
    P = model.params
    grads = {}
    entries = list(tape.entries)
    _, x_shape, n_tokens, xhat, inv, normed = entries.pop()
    grad_normed, grads["head.w"], grads["head.b"] = linear_backward(normed, P["head.w"], grad_logits)
    g, grads["norm.scale"], grads["norm.shift"] = layer_norm_backward(grad_normed, xhat, inv, P["norm.scale"])
    g = np.broadcast_to((g / n_tokens)[:, None, None, :], x_shape)
    for entry in reversed(entries):
        kind = entry[0]
        if kind == "block":
            _, s, b, bp, c = entry
            g, bg = block_backward(c, bp, g)
            pre = _block_prefix(s, b)
            for k, v in bg.items():
                grads[f"{pre}.{k}"] = v
        elif kind == "merge":
            _, s, c, C = entry
            g, grads[f"stages.{s}.merge.w"], grads[f"stages.{s}.merge.b"] = patch_merge_backward(
                c, P[f"stages.{s}.merge.w"], g, C)
        else:
            _, grads["stem.w"], grads["stem.b"] = linear_backward(entry[1], P["stem.w"], g)
    return {name: grads[name] for name in P}


# ---------------------------------------------------------------- accounting


def _dct_layer_cost(H, W, C):
    return H * W * C * math.ceil(math.log2(H * W)) if H * W > 1 else 0


def count_params_flops(cfg: ModelConfig) -> dict:
    """Analytic parameter and per-image multiply-add counts, broken down by stage.

    The stem is booked under the first stage and the pooling/norm/head under
    the last, so the totals are exactly the sums of the stage entries.
    """
    shapes = cfg.stage_shapes()
    K, r = cfg.hidden, cfg.mlp_ratio
    stages = []
    prev_c = None
    for s, (H, W, C) in enumerate(shapes):
        N = H * W
        l = cfg.stage_bands(s)
        params, ops = {}, {}
        if s == 0:
            fan_in = cfg.patch_size ** 2 * cfg.in_channels
            params["stem"] = fan_in * C + C
            ops["stem"] = N * (fan_in * C + C)
        else:
            params["merge"] = 4 * prev_c * C + C
            ops["merge"] = N * (4 * prev_c * C + C)
        depth = cfg.depths[s]
        params["norms"] = depth * 4 * C
        params["dswg"] = depth * (2 * l + dswg_mod.dswg_muladds(l, K))
        params["mlp"] = depth * (2 * r * C * C + r * C + C)
        ops["norms"] = depth * 2 * 4 * N * C
        ops["dct"] = depth * 2 * _dct_layer_cost(H, W, C)
        ops["modulation"] = depth * N * C
        if cfg.mode == "dynamic":
            ops["dswg"] = depth * C * (dswg_mod.dswg_muladds(l, K) + 4 * l)
        else:
            ops["dswg"] = 0
        ops["mlp"] = depth * N * (2 * r * C * C + r * C + C)
        if s == len(shapes) - 1:
            params["head"] = 2 * C + C * cfg.num_classes + cfg.num_classes
            ops["head"] = N * C + 4 * C + C * cfg.num_classes + cfg.num_classes
        stages.append({
            "stage": s, "H": H, "W": W, "C": C, "l": l,
            "params": sum(params.values()), "muladds": sum(ops.values()),
            "param_breakdown": params, "muladd_breakdown": ops,
        })
        prev_c = C
    return {
        "params": sum(e["params"] for e in stages),
        "muladds": sum(e["muladds"] for e in stages),
        "stages": stages,
    }


def with_mode(cfg: ModelConfig, mode: str) -> ModelConfig:
    return replace(cfg, mode=mode)


def config_fields():
    return [f.name for f in fields(ModelConfig)]
