"""Loss, AdamW, warmup + cosine schedule, and a resumable training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError, InvalidArgumentError, ShapeError
from .model import DSMModel, ModelConfig, model_backward, model_forward


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    peak_lr: float = 2e-3
    final_lr: float = 1e-6
    warmup_epochs: float = 2
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.0
    seed: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale ImageNet recipe, kept for reference; far too slow for a desk run."""
        return cls(**{"epochs": 300, "batch_size": 1024, "warmup_epochs": 10, **overrides})

    def validate(self) -> None:
        if not (self.peak_lr > self.final_lr > 0):
            raise ConfigError("need peak_lr > final_lr > 0", key="peak_lr")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError("need 0 <= warmup_epochs < epochs", key="warmup_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", key="batch_size")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)", key="beta1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("must lie in [0, 1)", key="label_smoothing")


# ---------------------------------------------------------------- loss


def cross_entropy(logits, labels, label_smoothing: float = 0.0):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, n = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= n:
        raise InvalidArgumentError(f"labels must lie in [0, {n})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    target = np.zeros_like(logits)
    target[np.arange(B), labels] = 1.0
    if label_smoothing:
        target = target * (1.0 - label_smoothing) + label_smoothing / n
    loss = -(target * log_p).sum() / B
    grad = (np.exp(log_p) - target) / B
    return float(loss), grad


# ---------------------------------------------------------------- optimizer


@dataclass(eq=False)
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def decays(name: str, param: np.ndarray) -> bool:
    """Weight decay applies to weight matrices only, not to norms or biases."""
    return param.ndim >= 2


def adamw_step(params, grads, state: OptimizerState, cfg: TrainConfig, lr: float):
    """One in-place AdamW update with decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m, v = state.m[name], state.v[name]
        if decays(name, p) and cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``final_lr`` at ``total_steps``."""
    warmup = warmup_steps(total_steps, cfg)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if total_steps == warmup:
        return cfg.final_lr
    t = min(1.0, (step - warmup) / (total_steps - warmup))
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * t))


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup_epochs / cfg.epochs))


# ---------------------------------------------------------------- loop


def evaluate(model: DSMModel, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        logits, _ = model_forward(model, dataset.images[start:start + batch_size])
        correct += int((logits.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return 100.0 * correct / len(dataset)


def format_metrics(step, lr, loss, acc) -> str:
    return f"step={int(step)} lr={float(lr)!r} loss={float(loss)!r} acc={float(acc)!r}"


def _philox(*words) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(words))))


class Trainer:
    """Step-addressable training: the batch for step ``s`` depends only on
    (seed, s), so a run resumed from a checkpoint continues exactly where the
    uninterrupted run would be.
    """

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset,
                 test_set: Optional[Dataset] = None, model: Optional[DSMModel] = None,
                 opt: Optional[OptimizerState] = None, rng_state=None):
        train_cfg.validate()
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.train_set = train_set
        self.test_set = test_set
        self.model = model or DSMModel.create(model_cfg, seed=train_cfg.seed)
        self.opt = opt or OptimizerState.zeros_like(self.model.params)
        self.rng = _philox(train_cfg.seed, 3)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.history: list[float] = []  # per-step batch losses
        self.evals: list[tuple[int, float]] = []  # (step, accuracy) at epoch ends
        self._perm_epoch = None
        self._perm = None

    @property
    def step(self) -> int:
        return self.opt.step

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        if self._perm_epoch != epoch:
            self._perm = _philox(self.cfg.seed, 2, epoch).permutation(len(self.train_set))
            self._perm_epoch = epoch
        bs = self.cfg.batch_size
        return self._perm[k * bs:(k + 1) * bs]

    def train_step(self, images=None, labels=None) -> float:
        """One optimizer update; returns the batch loss before the update."""
        if images is None:
            idx = self.batch_indices(self.step)
            images, labels = self.train_set.images[idx], self.train_set.labels[idx]
        if self.model_cfg.mode == "random" and self.model_cfg.resample_random:
            for name, buf in self.model.buffers.items():
                buf[...] = self.rng.uniform(0.0, 1.0, size=buf.shape)
        logits, tape = model_forward(self.model, images)
        loss, grad = cross_entropy(logits, labels, self.cfg.label_smoothing)
        grads = model_backward(tape, grad)
        lr = lr_at(self.step + 1, self.total_steps, self.cfg)
        adamw_step(self.model.params, grads, self.opt, self.cfg, lr)
        self.model.mark_updated()
        self.history.append(loss)
        return loss

    def run(self, until: Optional[int] = None, log=None, on_epoch=None, stop=None) -> Optional[float]:
        """Train up to step ``until`` (default: the end of the schedule).

        At every epoch boundary the test accuracy (train accuracy when there
        is no test set) is measured and, if ``log`` is given, a metrics line
        is written. ``stop`` is polled after every step; returning True ends
        the run early. Returns the last measured accuracy.
        """
        until = self.total_steps if until is None else min(until, self.total_steps)
        acc = None
        epoch_losses = []
        while self.step < until:
            epoch_losses.append(self.train_step())
            if self.step % self.steps_per_epoch == 0 or self.step == self.total_steps:
                acc = evaluate(self.model, self.test_set or self.train_set)
                self.evals.append((self.step, acc))
                if log is not None:
                    line = format_metrics(self.step, lr_at(self.step, self.total_steps, self.cfg),
                                          float(np.mean(epoch_losses)), acc)
                    log.write(line + "\n")
                    log.flush()
                if on_epoch is not None:
                    on_epoch(self)
                epoch_losses = []
            if stop is not None and stop():
                break
        return acc
