"""Orthonormal 2D DCT-II / DCT-III on rectangular grids and zigzag ordering.

The 1D transform along each axis uses Makhoul's reordering: the input is
permuted (even samples ascending, odd samples descending), a real FFT of
length N is taken, and the result is rotated by a quarter-sample twiddle.
Lengths below ``SMALL_LENGTH`` use a dense basis matrix instead. Arbitrary
lengths are supported; numpy's pocketfft handles prime sizes internally.

All transforms act on the trailing two axes, so a ``(B, C, H, W)`` stack is
transformed in one call.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

from .errors import FormatError, InvalidArgumentError, NumericError, ResourceLimitError, ShapeError, VersionError

MAX_COEFFICIENTS = 2**24
SMALL_LENGTH = 8

Domain = Literal["spatial", "frequency"]


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k holds frequency k sampled at n points."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    m[0] *= np.sqrt(1.0 / n)
    m[1:] *= np.sqrt(2.0 / n)
    return m


@dataclass(frozen=True)
class _AxisTable:
    n: int
    matrix: np.ndarray | None = None
    twiddle: np.ndarray | None = None
    untwiddle: np.ndarray | None = None
    scale: np.ndarray | None = None

    @classmethod
    def build(cls, n: int) -> "_AxisTable":
        if n < SMALL_LENGTH:
            return cls(n=n, matrix=dct_matrix(n))
        k = np.arange(n // 2 + 1)
        twiddle = np.exp(-1j * np.pi * k / (2 * n))
        scale = np.full(n, np.sqrt(2.0 / n))
        scale[0] = np.sqrt(1.0 / n)
        for arr in (twiddle, scale):
            arr.setflags(write=False)
        untwiddle = np.conj(twiddle)
        untwiddle.setflags(write=False)
        return cls(n=n, twiddle=twiddle, untwiddle=untwiddle, scale=scale)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """DCT-II along the last axis."""
        n = self.n
        if self.matrix is not None:
            return x @ self.matrix.T
        v = np.concatenate((x[..., ::2], x[..., 1::2][..., ::-1]), axis=-1)
        z = np.fft.rfft(v, axis=-1) * self.twiddle
        y = np.empty(x.shape, dtype=np.float64)
        y[..., : n // 2 + 1] = z.real
        y[..., n // 2 + 1 :] = -z.imag[..., 1 : (n + 1) // 2][..., ::-1]
        y *= self.scale
        return y

    def inverse(self, y: np.ndarray) -> np.ndarray:
        """DCT-III along the last axis (exact inverse of ``forward``)."""
        n = self.n
        if self.matrix is not None:
            return y @ self.matrix
        y = y / self.scale
        mirrored = np.zeros(y.shape[:-1] + (n // 2 + 1,), dtype=np.float64)
        mirrored[..., 1:] = y[..., ::-1][..., : n // 2]
        spec = (y[..., : n // 2 + 1] - 1j * mirrored) * self.untwiddle
        v = np.fft.irfft(spec, n=n, axis=-1)
        x = np.empty(y.shape, dtype=np.float64)
        half = (n + 1) // 2
        x[..., ::2] = v[..., :half]
        x[..., 1::2] = v[..., half:][..., ::-1]
        return x


@dataclass(frozen=True)
class DCTPlan:
    """Precomputed tables for transforms on an ``H x W`` grid.

    Immutable, so one plan can be shared freely between threads.
    """

    H: int
    W: int
    normalization: str = "orthonormal"
    rows: _AxisTable = field(repr=False, default=None)
    cols: _AxisTable = field(repr=False, default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)


def _check_dims(H, W):
    for name, v in (("H", H), ("W", W)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise InvalidArgumentError(f"{name} must be an integer, got {v!r}")
        if v < 1:
            raise InvalidArgumentError(f"{name} must be >= 1, got {v}")


def make_dct_plan(H: int, W: int, max_coefficients: int = MAX_COEFFICIENTS) -> DCTPlan:
    _check_dims(H, W)
    if H * W > max_coefficients:
        raise ResourceLimitError(
            f"{H}x{W} grid has {H * W} coefficients, limit is {max_coefficients}"
        )
    return DCTPlan(H=int(H), W=int(W), rows=_AxisTable.build(int(H)), cols=_AxisTable.build(int(W)))


@functools.lru_cache(maxsize=64)
def get_plan(H: int, W: int) -> DCTPlan:
    """Cached plan lookup for the model's fixed stage resolutions."""
    return make_dct_plan(H, W)


@dataclass(frozen=True)
class SpectrumGrid:
    """A real grid tagged with the domain it lives in."""

    data: np.ndarray
    domain: Domain = "spatial"

    def __post_init__(self):
        if self.domain not in ("spatial", "frequency"):
            raise InvalidArgumentError(f"unknown domain tag {self.domain!r}")
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))

    @property
    def shape(self):
        return self.data.shape


GridLike = Union[SpectrumGrid, np.ndarray]


def _unwrap(plan: DCTPlan, x: GridLike, expect: Domain):
    if isinstance(x, SpectrumGrid):
        if x.domain != expect:
            raise InvalidArgumentError(f"expected a {expect} grid, got {x.domain}")
        data, tagged = x.data, True
    else:
        data, tagged = np.asarray(x, dtype=np.float64), False
    if data.ndim < 2 or data.shape[-2:] != plan.shape:
        raise ShapeError(f"grid shape {data.shape} does not match plan {plan.shape}")
    if not np.isfinite(data).all():
        raise NumericError("transform input contains non-finite values")
    return data, tagged


def dct2(plan: DCTPlan, x: GridLike) -> GridLike:
    """Orthonormal 2D DCT-II over the trailing two axes."""
    data, tagged = _unwrap(plan, x, "spatial")
    y = plan.cols.forward(data)
    y = plan.rows.forward(np.swapaxes(y, -1, -2))
    y = np.ascontiguousarray(np.swapaxes(y, -1, -2))
    return SpectrumGrid(y, "frequency") if tagged else y


def idct2(plan: DCTPlan, y: GridLike) -> GridLike:
    """Orthonormal 2D DCT-III; inverse and adjoint of :func:`dct2`."""
    data, tagged = _unwrap(plan, y, "frequency")
    x = plan.cols.inverse(data)
    x = plan.rows.inverse(np.swapaxes(x, -1, -2))
    x = np.ascontiguousarray(np.swapaxes(x, -1, -2))
    return SpectrumGrid(x, "spatial") if tagged else x


@dataclass(frozen=True)
class ZigzagOrder:
    """Flat indices (``row * W + col``) in zigzag scan order."""

    H: int
    W: int
    order: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.H * self.W

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(k) // self.W, int(k) % self.W) for k in self.order]


def zigzag_order(H: int, W: int) -> ZigzagOrder:
    """JPEG-style zigzag generalised to rectangles.

    Anti-diagonal ``d = row + col`` runs from 0 to ``H + W - 2``; even
    diagonals are walked bottom-left to top-right, odd ones the other way,
    each clamped to the grid.
    """
    _check_dims(H, W)
    flat = []
    for d in range(H + W - 1):
        lo, hi = max(0, d - W + 1), min(d, H - 1)
        rows = range(hi, lo - 1, -1) if d % 2 == 0 else range(lo, hi + 1)
        flat.extend(r * W + (d - r) for r in rows)
    order = np.asarray(flat, dtype=np.intp)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    order.setflags(write=False)
    inverse.setflags(write=False)
    return ZigzagOrder(H=int(H), W=int(W), order=order, inverse=inverse)


@functools.lru_cache(maxsize=64)
def get_zigzag(H: int, W: int) -> ZigzagOrder:
    return zigzag_order(H, W)


def zigzag_flatten(order: ZigzagOrder, g: GridLike) -> np.ndarray:
    data = g.data if isinstance(g, SpectrumGrid) else np.asarray(g)
    if data.ndim < 2 or data.shape[-2:] != (order.H, order.W):
        raise ShapeError(f"grid shape {data.shape} does not match zigzag {order.H}x{order.W}")
    return data.reshape(data.shape[:-2] + (order.size,))[..., order.order]


def zigzag_unflatten(order: ZigzagOrder, e: np.ndarray) -> np.ndarray:
    e = np.asarray(e)
    if e.ndim < 1 or e.shape[-1] != order.size:
        raise ShapeError(f"vector length {e.shape[-1:]} does not match {order.size}")
    return e[..., order.inverse].reshape(e.shape[:-1] + (order.H, order.W))


# ---------------------------------------------------------------- DSMF dumps

DUMP_MAGIC = b"DSMF"
DUMP_VERSION = 1


def encode_spectrum(grid) -> bytes:
    """``DSMF``, u32 version, u32 H, u32 W, then H*W float64, little-endian, row-major."""
    data = grid.data if isinstance(grid, SpectrumGrid) else np.asarray(grid, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"a spectrum dump holds one H x W grid, got shape {data.shape}")
    H, W = data.shape
    head = DUMP_MAGIC + struct.pack("<III", DUMP_VERSION, H, W)
    return head + np.ascontiguousarray(data, dtype="<f8").tobytes()


def decode_spectrum(raw: bytes) -> np.ndarray:
    if len(raw) < 16 or raw[:4] != DUMP_MAGIC:
        raise FormatError("not a DSMF spectrum dump (bad magic)")
    version, H, W = struct.unpack_from("<III", raw, 4)
    if version != DUMP_VERSION:
        raise VersionError(f"spectrum dump version {version} is not supported")
    if len(raw) != 16 + 8 * H * W:
        raise FormatError(f"expected {8 * H * W} data bytes for {H}x{W}, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(H, W).astype(np.float64)
