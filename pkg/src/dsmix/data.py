"""Datasets: IDX (MNIST-format) files and a synthetic frequency-band task."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, InvalidArgumentError
from .spectral import get_plan, idct2

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) ints in [0, num_classes)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise InvalidArgumentError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.images.ndim != 4 or len(self.images) < 1:
            raise InvalidArgumentError(f"images must be a non-empty N x H x W x C array, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConsistencyError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(self.images).all():
            raise InvalidArgumentError("image values must be finite")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_dataset(images_path, labels_path, split="train", num_classes=10) -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled to [0, 1] by 1/255."""
    images = _parse_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(
        images=(images.astype(np.float64) / 255.0)[..., None],
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        split=split,
    )


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (magic 0x08 type, rank in low byte)."""
    array = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


# ---------------------------------------------------------------- synthetic task


def band_edges(H: int, W: int, num_classes: int) -> np.ndarray:
    """Anti-diagonal boundaries: band k covers ``edges[k] <= u + v < edges[k+1]``.

    The DC diagonal (d = 0) belongs to no band.
    """
    top = H + W - 1
    if num_classes > top - 1:
        raise InvalidArgumentError(f"a {H}x{W} grid supports at most {top - 1} bands")
    return 1 + (np.arange(num_classes + 1) * (top - 1)) // num_classes


def band_of(u, v, edges) -> np.ndarray:
    return np.searchsorted(edges, np.asarray(u) + np.asarray(v), side="right") - 1


def _band_cells(H, W, edges, k):
    u, v = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    sel = band_of(u, v, edges) == k
    return np.stack([u[sel], v[sel]], axis=1)


def class_prototype(k: int, H: int, W: int, num_classes: int) -> np.ndarray:
    """Noise-free image of class ``k``: one DCT basis pattern at the band centre."""
    edges = band_edges(H, W, num_classes)
    cells = _band_cells(H, W, edges, k)
    d = (edges[k] + edges[k + 1] - 1) // 2
    on_diag = cells[cells.sum(axis=1) == d]
    u, v = on_diag[len(on_diag) // 2]
    spec = np.zeros((H, W))
    spec[u, v] = 1.0
    pattern = idct2(get_plan(H, W), spec)
    return 0.5 + 0.4 * pattern / np.abs(pattern).max()


def synth_dataset(seed, n, num_classes=10, H_img=32, W_img=32, split="train",
                  noise=0.1, gratings=3, distractor=0.5, contrast=0.15) -> Dataset:
    """Frequency-band classification.

    Each class owns a contiguous range of DCT anti-diagonals. An image sums
    ``gratings`` unit-amplitude cosine gratings drawn from its class band
    (random cells, random phases) and one grating of amplitude
    ``distractor`` from another band; the sum is rescaled to standard
    deviation ``contrast`` around 0.5, Gaussian noise of std ``noise`` is
    added and pixels are clipped to [0, 1]. Labels cycle through the
    classes before shuffling, so the histogram is balanced within one.
    """
    if n < num_classes:
        raise InvalidArgumentError(f"n={n} must be >= num_classes={num_classes}")
    stream = 0 if split == "train" else 1
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7, stream])))
    edges = band_edges(H_img, W_img, num_classes)
    cells = [_band_cells(H_img, W_img, edges, k) for k in range(num_classes)]
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    i = (np.arange(H_img) + 0.5)[:, None]
    j = (np.arange(W_img) + 0.5)[None, :]

    def grating(cell, ph):
        u, v = cell
        return np.cos(np.pi * u * i / H_img + ph[0]) * np.cos(np.pi * v * j / W_img + ph[1])

    images = np.empty((n, H_img, W_img, 1))
    for idx, k in enumerate(labels):
        img = np.zeros((H_img, W_img))
        for cell in cells[k][rng.integers(len(cells[k]), size=gratings)]:
            img += grating(cell, rng.uniform(0, 2 * np.pi, size=2))
        if distractor:
            other = (k + 1 + rng.integers(num_classes - 1)) % num_classes
            cell = cells[other][rng.integers(len(cells[other]))]
            img += distractor * grating(cell, rng.uniform(0, 2 * np.pi, size=2))
        img = 0.5 + contrast * img / max(img.std(), 1e-12)
        img += noise * rng.standard_normal((H_img, W_img))
        images[idx, ..., 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels.astype(np.int64), num_classes=num_classes, split=split)
