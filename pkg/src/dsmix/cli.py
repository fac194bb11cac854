"""``dsmix`` command line: train, eval, bench, ablate, sweep, spectrum.

Every command takes ``--config FILE`` and any number of ``--set key=value``
overrides, writes ``resolved-config.txt`` into its output directory, and
exits 0 only when all of its outputs were written. Outputs other than the
append-only training log are written to a temporary file and renamed.
"""

from __future__ import annotations

import argparse
import math
import signal
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, plots
from .checkpoint import atomic_write, load_checkpoint, resume_trainer, save_trainer
from .config import RunConfig, describe_keys, parse_config, render_config
from .data import Dataset, _parse_idx, IDX_IMAGES_MAGIC, load_idx_dataset, synth_dataset
from .errors import ConfigError, DSMError, InvalidArgumentError, ShapeError
from .spectral import dct2, encode_spectrum, get_plan
from .train import Trainer, evaluate, format_metrics, lr_at

HEAT_CHARS = " .:-=+*#%@"


def write_text(path, text: str) -> Path:
    path = Path(path)
    atomic_write(path, text.encode("utf-8"))
    return path


# ---------------------------------------------------------------- data


def _fit_to(images: np.ndarray, H: int, W: int) -> np.ndarray:
    """Zero-pad smaller images to the model's input size (e.g. 28x28 MNIST to 32x32)."""
    h, w = images.shape[1:3]
    if (h, w) == (H, W):
        return images
    if h > H or w > W:
        raise ShapeError(f"dataset images are {h}x{w}, larger than the model input {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    out = np.zeros((len(images), H, W, images.shape[3]))
    out[:, top:top + h, left:left + w] = images
    return out


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    m, o = cfg.model, cfg.options
    if o.dataset == "synthetic":
        kw = dict(num_classes=m.num_classes, H_img=m.image_height, W_img=m.image_width, noise=o.noise)
        return (synth_dataset(o.data_seed, o.n_train, split="train", **kw),
                synth_dataset(o.data_seed, o.n_test, split="test", **kw))
    paths = (o.train_images, o.train_labels, o.test_images, o.test_labels)
    if not all(paths):
        raise ConfigError("dataset = idx needs train_images, train_labels, test_images and test_labels",
                          key="dataset")
    out = []
    for split, (ip, lp), n in (("train", paths[:2], o.n_train), ("test", paths[2:], o.n_test)):
        d = load_idx_dataset(ip, lp, split=split, num_classes=m.num_classes)
        if d.images.shape[3] != m.in_channels:
            raise ConfigError(f"IDX images have {d.images.shape[3]} channel(s)", key="in_channels")
        out.append(Dataset(_fit_to(d.images, m.image_height, m.image_width), d.labels,
                           m.num_classes, split).subset(n))
    return out[0], out[1]


def toy_setup(cfg: RunConfig) -> bench.ToySetup:
    o = cfg.options
    return bench.ToySetup(model=cfg.model, train=cfg.train, n_train=o.n_train, n_test=o.n_test,
                          data_seed=o.data_seed)


# ---------------------------------------------------------------- commands


class _Stop:
    """Turns SIGINT/SIGTERM into a flag polled between training steps."""

    def __init__(self):
        self.signum = None

    def __call__(self, signum, frame):
        self.signum = signum

    def __bool__(self):
        return self.signum is not None


class _Tee:
    """Log file wrapper that remembers the last metrics line."""

    def __init__(self, fh):
        self.fh = fh
        self.last = None

    def write(self, text):
        self.fh.write(text)
        if text.strip():
            self.last = text.strip().splitlines()[-1]

    def flush(self):
        self.fh.flush()


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    train_set, test_set = load_datasets(cfg)
    ckpt = out / "checkpoint.dsmc"
    resume = args.resume or cfg.options.checkpoint
    if resume:
        trainer = resume_trainer(resume, train_set, test_set)
        if trainer.model_cfg != cfg.model or trainer.cfg != cfg.train:
            raise ConfigError("checkpoint was written with a different model/train configuration")
    else:
        trainer = Trainer(cfg.model, cfg.train, train_set, test_set)
    log_path = out / "train.log"
    every = cfg.options.checkpoint_every * trainer.steps_per_epoch

    def on_epoch(t):
        if t.step % every == 0 or t.step == t.total_steps:
            save_trainer(ckpt, t)

    stop = _Stop()
    old = {s: signal.signal(s, stop) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        with open(log_path, "a", encoding="utf-8") as fh:
            log = _Tee(fh)
            acc = trainer.run(log=log, on_epoch=on_epoch, stop=lambda: bool(stop))
    finally:
        for s, h in old.items():
            signal.signal(s, h)
    save_trainer(ckpt, trainer)
    if stop:
        print(f"interrupted at step {trainer.step}; checkpoint saved to {ckpt}", file=sys.stderr)
        return 128 + stop.signum
    if cfg.options.figures:
        plots.plot_history(trainer.history, trainer.evals, out / "train.png")
    if log.last is None:  # resumed from a finished run
        acc = evaluate(trainer.model, test_set)
        log.last = format_metrics(trainer.step, lr_at(trainer.step, trainer.total_steps, trainer.cfg),
                                  float("nan"), acc)
    print(log.last)
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    path = args.checkpoint or cfg.options.checkpoint or str(out / "checkpoint.dsmc")
    ck = load_checkpoint(path)
    _, test_set = load_datasets(replace(cfg, model=ck.model.cfg))
    acc = evaluate(ck.model, test_set)
    print(f"step={ck.opt.step} acc={acc!r}")
    return 0


def cmd_bench(cfg: RunConfig, out: Path, args) -> int:
    rows = bench.bench_dct(cfg.options.bench_sizes, repeats=cfg.options.bench_repeats)
    lines = [bench.format_bench(rows), ""]
    for r in rows:
        if r.side <= 64:
            x = np.random.default_rng(0).standard_normal((r.side, r.side))
            naive = bench.median_time(lambda: bench.naive_dct2(x), repeats=1, warmup=0)
            lines.append(f"naive {r.side}x{r.side}: {naive * 1e6:.1f} us, {naive / r.seconds:.0f}x slower than dct2")
    text = "\n".join(lines) + "\n"
    write_text(out / "bench.txt", text)
    if cfg.options.figures:
        plots.plot_bench(rows, out / "bench.png")
    print(text, end="")
    return 0


def _report(rows, out: Path, stem: str, figures: bool, xlabel: str) -> int:
    records = "\n".join(r.record() for r in rows) + "\n"
    table = bench.format_report(rows) + "\n"
    write_text(out / f"{stem}.records", records)
    write_text(out / f"{stem}.txt", table)
    if figures:
        plots.plot_report(rows, out / f"{stem}.png", xlabel=xlabel)
    print(records + "\n" + table, end="")
    return 0


def _progress(row):
    print(f"# {row.record()} ({row.wall_time:.0f}s)", file=sys.stderr, flush=True)


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    rows = bench.run_ablation(cfg.options.modes, toy_setup(cfg), cfg.options.seeds, progress=_progress)
    return _report(rows, out, "ablation", cfg.options.figures, "mixing mode")


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    H = cfg.model.image_height // cfg.model.patch_size
    W = cfg.model.image_width // cfg.model.patch_size
    too_big = [l for l in cfg.options.l_values if l > H * W]
    if too_big:
        raise ConfigError(f"l values {too_big} exceed the {H}x{W} first-stage bands", key="l_values")
    rows = bench.sweep_spectrum_length(cfg.options.l_values, toy_setup(cfg), cfg.options.seeds,
                                       progress=_progress)
    return _report(rows, out, "sweep", cfg.options.figures, "spectrum length l")


def read_image(path, index: int = 0) -> np.ndarray:
    """Grayscale image in [0, 1] from .npy, an image file, or an IDX images file."""
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path, allow_pickle=False).astype(np.float64)
    elif path.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"):
        import matplotlib.image as mpimg

        img = np.asarray(mpimg.imread(path), dtype=np.float64)
        if img.max() > 1.0:
            img = img / 255.0
    else:
        images = _parse_idx(path, IDX_IMAGES_MAGIC, 3)
        if not 0 <= index < len(images):
            raise InvalidArgumentError(f"index {index} out of range for {len(images)} images")
        img = images[index].astype(np.float64) / 255.0
    if img.ndim == 3:
        img = img[..., :3].mean(axis=2)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2D image, got shape {img.shape}")
    return img


def ascii_heatmap(spectrum, decades: float = 6.0, max_width: int = 64) -> str:
    """Log-magnitude map, one character per coefficient (block max when wide)."""
    mag = np.abs(np.asarray(spectrum))
    step = max(1, math.ceil(max(mag.shape) / max_width))
    if step > 1:
        H, W = mag.shape
        pad = np.zeros((math.ceil(H / step) * step, math.ceil(W / step) * step))
        pad[:H, :W] = mag
        mag = pad.reshape(pad.shape[0] // step, step, pad.shape[1] // step, step).max(axis=(1, 3))
    top = mag.max()
    if top == 0:
        return "\n".join(" " * mag.shape[1] for _ in range(mag.shape[0]))
    level = (np.log10(np.maximum(mag, top * 10.0 ** -decades)) - np.log10(top)) / decades + 1.0
    idx = np.where(mag < top * 10.0 ** -decades, 0,
                   np.clip(1 + np.floor(level * (len(HEAT_CHARS) - 1)), 1, len(HEAT_CHARS) - 1)).astype(int)
    return "\n".join("".join(HEAT_CHARS[i] for i in row) for row in idx)


def cmd_spectrum(cfg: RunConfig, out: Path, args) -> int:
    source = args.image or cfg.options.image
    if not source:
        raise ConfigError("spectrum needs an input (--image or 'image = ...')", key="image")
    img = read_image(source, cfg.options.index)
    spec = dct2(get_plan(*img.shape), img)
    atomic_write(out / "spectrum.dsmf", encode_spectrum(spec))
    heat = ascii_heatmap(spec)
    write_text(out / "spectrum.txt", heat + "\n")
    if cfg.options.figures:
        plots.plot_spectrum(img, spec, out / "spectrum.png", title=Path(source).name)
    print(heat)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "spectrum": cmd_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsmix", description="Dynamic spectrum mixer toolkit.",
                                     epilog="Run 'dsmix keys' to list every configuration key.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if name == "train":
            p.add_argument("--resume", help="continue from this checkpoint")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint to evaluate")
        if name == "spectrum":
            p.add_argument("--image", help=".npy, image file, or IDX images file")
    sub.add_parser("keys", help="list configuration keys, types and defaults")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "keys":
        print(describe_keys())
        return 0
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"out_dir={args.out}")
        cfg = parse_config(args.config, overrides)
        out = Path(cfg.options.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_text(out / "resolved-config.txt", render_config(cfg))
        t0 = time.perf_counter()
        code = COMMANDS[args.command](cfg, out, args)
        print(f"# {args.command} finished in {time.perf_counter() - t0:.1f}s; outputs in {out}",
              file=sys.stderr)
        return code
    except (DSMError, OSError) as exc:
        print(f"dsmix {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
