"""DSMC v1 checkpoint files.

Layout, little-endian throughout::

    b"DSMC"  u32 version
    u32 n    n bytes of UTF-8 JSON (configs, step, RNG state)
    u32 count
    count x (u32 name_len, name, u32 rank, rank x u32 dim, float64 data)
    u32 crc32 of every preceding byte

Files are written to a temporary sibling and renamed into place, so a
reader never sees a partial checkpoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, VersionError
from .model import DSMModel, ModelConfig
from .train import OptimizerState, TrainConfig

MAGIC = b"DSMC"
VERSION = 1


def encode(meta: dict, tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(text)), text,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)) + raw_name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes):
    """Inverse of :func:`encode`; returns ``(meta, tensors)``."""
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError("not a DSMC checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        pos = 8
        (n,) = struct.unpack_from("<I", body, pos)
        meta = json.loads(body[pos + 4:pos + 4 + n].decode("utf-8"))
        pos += 4 + n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + name_len].decode("utf-8")
            pos += 4 + name_len
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) * 8
            if pos + size > len(body):
                raise FormatError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after the last tensor")
    return meta, tensors


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rng_to_json(state):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"uint64": [int(x) for x in v]}
        return v

    return conv(state)


def _rng_from_json(state):
    def conv(v):
        if isinstance(v, dict):
            if set(v) == {"uint64"}:
                return np.array(v["uint64"], dtype=np.uint64)
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


def _config_to_json(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def checkpoint_bytes(model: DSMModel, opt: OptimizerState, train_cfg: TrainConfig, rng_state=None) -> bytes:
    meta = {
        "model": _config_to_json(model.cfg),
        "train": _config_to_json(train_cfg),
        "step": opt.step,
        "rng": _rng_to_json(rng_state) if rng_state is not None else None,
    }
    tensors = {}
    for prefix, group in (("param", model.params), ("buffer", model.buffers),
                          ("adam.m", opt.m), ("adam.v", opt.v)):
        for name, arr in group.items():
            tensors[f"{prefix}/{name}"] = arr
    return encode(meta, tensors)


def save_checkpoint(path, model: DSMModel, opt: OptimizerState, train_cfg: TrainConfig, rng_state=None) -> None:
    atomic_write(path, checkpoint_bytes(model, opt, train_cfg, rng_state))


@dataclass(eq=False)
class Checkpoint:
    model: DSMModel
    opt: OptimizerState
    train_cfg: TrainConfig
    rng_state: object
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = decode(Path(path).read_bytes())
    try:
        model_cfg = ModelConfig(**meta["model"])
        train_cfg = TrainConfig(**meta["train"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint metadata is incomplete: {exc}") from None
    groups = {"param": {}, "buffer": {}, "adam.m": {}, "adam.v": {}}
    for key, arr in tensors.items():
        prefix, _, name = key.partition("/")
        if prefix not in groups:
            raise FormatError(f"unexpected tensor group {prefix!r}")
        groups[prefix][name] = arr
    model = DSMModel(cfg=model_cfg, params=groups["param"], buffers=groups["buffer"])
    opt = OptimizerState(m=groups["adam.m"], v=groups["adam.v"], step=int(meta["step"]))
    rng = _rng_from_json(meta["rng"]) if meta.get("rng") is not None else None
    return Checkpoint(model=model, opt=opt, train_cfg=train_cfg, rng_state=rng, meta=meta)


def tensor_digest(model: DSMModel) -> str:
    """SHA-256 over parameter and buffer tensors (names, shapes and bytes)."""
    h = hashlib.sha256()
    for group in (model.params, model.buffers):
        for name, arr in group.items():
            h.update(name.encode())
            h.update(np.asarray(arr.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_trainer(path, trainer) -> None:
    save_checkpoint(path, trainer.model, trainer.opt, trainer.cfg, trainer.rng.bit_generator.state)


def resume_trainer(path, train_set, test_set=None):
    from .train import Trainer

    ck = load_checkpoint(path)
    return Trainer(ck.model.cfg, ck.train_cfg, train_set, test_set,
                   model=ck.model, opt=ck.opt, rng_state=ck.rng_state)
