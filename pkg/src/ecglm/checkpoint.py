"""Binary checkpoint format for named parameter sets.

Layout (little-endian):
    magic  b"DGCK"
    version          u16  (currently 1)
    parameter count  u32
    per parameter:
        name length  u16, then UTF-8 name bytes
        ndim         u8, then each dimension as u32
        trainable    u8 (0/1)
        data         float64 row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Parameter

MAGIC = b"DGCK"
VERSION = 1


class CheckpointError(ValueError):
    """Bad magic, version, or truncated checkpoint data."""


def save_checkpoint(params: dict[str, Parameter], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(params)))
        for name, p in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", p.data.ndim))
            for dim in p.data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(struct.pack("<B", 1 if p.trainable else 0))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def load_checkpoint(path: str | Path) -> dict[str, Parameter]:
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, count = struct.unpack("<HI", _read(fh, 6))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out: dict[str, Parameter] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1))
            shape = tuple(struct.unpack("<I", _read(fh, 4))[0] for _ in range(ndim))
            (trainable,) = struct.unpack("<B", _read(fh, 1))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read(fh, 8 * n), dtype="<f8").reshape(shape)
            out[name] = Parameter(data.copy(), name=name, trainable=bool(trainable))
    return out


def restore_into(params: dict[str, Parameter], path: str | Path,
                 strict: bool = True) -> None:
    """Load a checkpoint and copy values into an existing parameter dict."""
    loaded = load_checkpoint(path)
    missing = set(params) - set(loaded)
    if strict and missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        if name not in loaded:
            continue
        src = loaded[name]
        if src.data.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {src.data.shape} vs {p.data.shape}")
        p.data[...] = src.data
