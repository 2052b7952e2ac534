"""Self-describing checkpoint container.

Layout (little-endian), magic ``CKDC``::

    magic[4] | version u32 | config_hash[32] (raw sha256)
    | meta_len u32 | meta (utf-8 JSON: model config, train config, epoch, ...)
    | num_tensors u32
    | per tensor: name_len u16 | name | ndim u8 | dims u32[ndim] | f64[prod(dims)]

Tensor names are prefixed ``param/``, ``running/`` or ``velocity/``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetFormatError, _Reader

MAGIC = b"CKDC"
VERSION = 1


class CheckpointError(DatasetFormatError):
    pass


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    config_hash: str
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def dumps(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), bytes.fromhex(ckpt.config_hash),
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes, expected_hash: str | None = None) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    digest = r.take(32, "config hash").hex()
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointError(f"config hash mismatch: file {digest[:12]}, run {expected_hash[:12]}", 8)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode())
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode()
        (ndim,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} dims") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        tensors[name] = r.array("<f8", size, f"{name} payload").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after tensor table", r.pos)
    return Checkpoint(digest, meta, tensors)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(ckpt))
    return path


def load(path, expected_hash: str | None = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected_hash)
