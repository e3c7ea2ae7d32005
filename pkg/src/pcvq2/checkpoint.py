"""Binary named-tensor archive.

Layout (all integers little-endian)::

    b"PCVQ" | u32 version | u32 record count
    per record: u32 name length | name (utf-8) | u8 dtype tag | u32 rank
                | u64 dims[rank] | raw little-endian payload
    u32 metadata length | metadata (utf-8 JSON)

Nothing may follow the metadata block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"PCVQ"
FORMAT_VERSION = 1

_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "<i4", 5: "|u1", 6: "|b1"}


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list, repr=False, compare=False)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                if k.startswith(prefix + ".")}

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for k, v in module.state_dict().items():
            self.tensors[f"{prefix}.{k}"] = v.detach().cpu().numpy().copy()


def _tag(arr: np.ndarray) -> int:
    for tag, s in _DTYPES.items():
        dt = np.dtype(s)
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return tag
    raise CheckpointFormatError(f"unsupported dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        tag = _tag(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[tag])).tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name!r}")
        dims = r.unpack(f"<{rank}Q")
        dt = np.dtype(_DTYPES[tag])
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).copy()
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"corrupt metadata: {e}") from None
    if r.pos != len(raw):
        raise CheckpointFormatError("trailing bytes after checkpoint metadata")
    return Checkpoint(tensors, meta)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
