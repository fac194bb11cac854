"""Reference oracle, DCT timing benchmark, and toy-scale ablations.

``naive_dct2`` evaluates the cosine double sum directly, one output
coefficient at a time, and shares no code with :mod:`dsmix.spectral`; it is
the correctness oracle for the fast transform.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .checkpoint import tensor_digest
from .data import Dataset, synth_dataset
from .errors import InvalidArgumentError
from .model import DSMModel, ModelConfig, count_params_flops
from .spectral import dct2, make_dct_plan
from .train import TrainConfig, Trainer, evaluate


def naive_dct2(x) -> np.ndarray:
    """Orthonormal 2D DCT-II by direct summation, O(H^2 W^2)."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape
    i = np.arange(H) + 0.5
    j = np.arange(W) + 0.5
    out = np.empty((H, W))
    for h in range(H):
        ch = np.cos(np.pi * h / H * i)
        ah = math.sqrt((1.0 if h == 0 else 2.0) / H)
        for w in range(W):
            basis = np.multiply.outer(ch, np.cos(np.pi * w / W * j))
            aw = math.sqrt((1.0 if w == 0 else 2.0) / W)
            out[h, w] = ah * aw * float((x * basis).sum())
    return out


def median_time(fn: Callable[[], object], repeats: int = 9, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@dataclass
class BenchRow:
    side: int
    seconds: float
    ratio: Optional[float] = None  # time / time of the previous row
    nlogn_ratio: Optional[float] = None  # N log N prediction for the same step
    quadratic_ratio: Optional[float] = None

    @property
    def n(self) -> int:
        return self.side * self.side


def bench_dct(sides: Sequence[int], repeats: int = 9, warmup: int = 2, seed: int = 0) -> list[BenchRow]:
    """Median wall time of the fast ``dct2`` on ``side x side`` grids.

    Each row after the first carries the measured ratio to the previous
    row next to what an N log N and an N^2 cost model (N = side^2) predict;
    doubling the side is the time(4N)/time(N) step. pocketfft runs
    single-threaded, so no pinning is needed.
    """
    sides = list(sides)
    if sides != sorted(sides) or len(set(sides)) != len(sides):
        raise InvalidArgumentError("sizes must be strictly ascending")
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    for side in sides:
        plan = make_dct_plan(side, side)
        x = rng.standard_normal((side, side))
        row = BenchRow(side=side, seconds=median_time(lambda: dct2(plan, x), repeats, warmup))
        if rows:
            prev = rows[-1]
            row.ratio = row.seconds / prev.seconds
            row.nlogn_ratio = (row.n * math.log2(row.n)) / (prev.n * math.log2(prev.n))
            row.quadratic_ratio = (row.n / prev.n) ** 2
        rows.append(row)
    return rows


def format_bench(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'grid':>10} {'N':>8} {'median_us':>11} {'ratio':>7} {'nlogn':>7} {'N^2':>7}"]
    for r in rows:
        fmt = lambda v: f"{v:7.2f}" if v is not None else f"{'-':>7}"
        lines.append(f"{r.side:>4}x{r.side:<5} {r.n:>8} {r.seconds * 1e6:>11.1f} "
                     f"{fmt(r.ratio)} {fmt(r.nlogn_ratio)} {fmt(r.quadratic_ratio)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- ablations


@dataclass
class AblationReport:
    config: str
    seed: int
    train_acc: float
    test_acc: float
    steps: int
    wall_time: float
    init_digest: str = ""
    dswg_muladds: Optional[int] = None

    def record(self) -> str:
        return f"config={self.config} seed={self.seed} acc={self.test_acc!r}"


@dataclass(frozen=True)
class ToySetup:
    """Model, schedule and data sizes shared by every ablation run."""

    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset(
        "dsm-s-desk", widths=(16, 32, 64, 128), depths=(1, 1, 1, 1)))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=16, warmup_epochs=2))
    n_train: int = 2000
    n_test: int = 1000
    data_seed: int = 0

    def datasets(self) -> tuple[Dataset, Dataset]:
        m = self.model
        kw = dict(num_classes=m.num_classes, H_img=m.image_height, W_img=m.image_width)
        return (synth_dataset(self.data_seed, self.n_train, split="train", **kw),
                synth_dataset(self.data_seed, self.n_test, split="test", **kw))


def _train_once(label, model_cfg, train_cfg, train_set, test_set, seed) -> AblationReport:
    tcfg = replace(train_cfg, seed=seed)
    model = DSMModel.create(model_cfg, seed=seed)
    digest = tensor_digest(model)
    trainer = Trainer(model_cfg, tcfg, train_set, test_set, model=model)
    t0 = time.perf_counter()
    test_acc = trainer.run()
    wall = time.perf_counter() - t0
    return AblationReport(config=label, seed=seed, train_acc=evaluate(trainer.model, train_set),
                          test_acc=test_acc, steps=trainer.step, wall_time=wall, init_digest=digest)


def run_ablation(modes: Iterable[str] = ("dynamic", "allpass", "random"), setup: ToySetup = ToySetup(),
                 seeds: Iterable[int] = (0, 1, 2), progress=None) -> list[AblationReport]:
    """Train one model per (mode, seed); the mixing mode is the only difference."""
    train_set, test_set = setup.datasets()
    rows = []
    for seed in seeds:
        for mode in modes:
            row = _train_once(mode, replace(setup.model, mode=mode), setup.train,
                              train_set, test_set, seed)
            rows.append(row)
            if progress:
                progress(row)
    return rows


def sweep_spectrum_length(l_values: Iterable[int], setup: ToySetup = ToySetup(),
                          seeds: Iterable[int] = (0, 1, 2), progress=None) -> list[AblationReport]:
    """Train one dynamic-mode model per (l, seed) and record the DSWG cost."""
    train_set, test_set = setup.datasets()
    rows = []
    for seed in seeds:
        for l in l_values:
            cfg = replace(setup.model, spectrum_length=int(l), mode="dynamic")
            row = _train_once(f"l{l}", cfg, setup.train, train_set, test_set, seed)
            row.dswg_muladds = sum(s["muladd_breakdown"]["dswg"] for s in count_params_flops(cfg)["stages"])
            rows.append(row)
            if progress:
                progress(row)
    return rows


def mean_by_config(rows: Sequence[AblationReport]) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in rows:
        groups.setdefault(r.config, []).append(r.test_acc)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def format_report(rows: Sequence[AblationReport]) -> str:
    lines = [f"{'config':<14} {'seed':>4} {'train%':>7} {'test%':>7} {'steps':>6} {'sec':>7} {'dswg_ops':>9}"]
    for r in rows:
        ops = "-" if r.dswg_muladds is None else str(r.dswg_muladds)
        lines.append(f"{r.config:<14} {r.seed:>4} {r.train_acc:>7.2f} {r.test_acc:>7.2f} "
                     f"{r.steps:>6} {r.wall_time:>7.1f} {ops:>9}")
    lines.append("")
    for k, v in mean_by_config(rows).items():
        lines.append(f"mean {k:<14} {v:7.2f}")
    return "\n".join(lines)
