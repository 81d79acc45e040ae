"""SGD with momentum/weight decay, and the on-disk checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DetectorParams

CKPT_MAGIC = b"SUPICI-CKPT-1\n"


@dataclass
class OptimState:
    size: int
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffer: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.buffer is None:
            self.buffer = np.zeros(self.size)


def sgd_step(params: DetectorParams, grad: np.ndarray, opt: OptimState, mask=None) -> DetectorParams:
    """``v <- momentum*v + grad + wd*params; params <- params - lr*v``.

    Entries outside ``mask`` are frozen: neither moved nor given momentum.
    Mutates ``opt.buffer``; callers serialize access to one optimizer.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape or opt.buffer.shape != params.flat.shape:
        raise ValueError("gradient / optimizer buffer shape does not match params")
    step = grad + opt.weight_decay * params.flat
    if mask is not None:
        step = np.where(mask, step, 0.0)
    opt.buffer = opt.momentum * opt.buffer + step
    if not np.all(np.isfinite(opt.buffer)):
        raise FloatingPointError("non-finite momentum buffer")
    return DetectorParams(params.flat - opt.lr * opt.buffer, params.manifest)


def save_checkpoint(params: DetectorParams, path, meta: dict | None = None) -> None:
    """Magic line, uint64 LE header length, JSON header, float64 LE values."""
    header = {"format": "SUPICI-CKPT-1",
              "manifest": [[name, list(shape)] for name, shape in params.manifest],
              "size": params.size,
              "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[DetectorParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a SUPICI-CKPT-1 checkpoint")
    pos = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    manifest = tuple((n, tuple(s)) for n, s in header["manifest"])
    flat = np.frombuffer(data[pos:], dtype="<f8").astype(np.float64)
    if flat.size != header["size"]:
        raise ValueError(f"{path}: expected {header['size']} values, found {flat.size}")
    return DetectorParams(flat, manifest), header.get("meta", {})
