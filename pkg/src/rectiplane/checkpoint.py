"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"RPLN" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
    then per tensor: u32 name length | name | u32 rank | rank x u64 extents
                     | float32 payload
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, IoFailure, VersionMismatch

MAGIC = b"RPLN"
VERSION = 1


@dataclass
class Checkpoint:
    stage: str
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.stage == other.stage
            and self.version == other.version
            and self.metadata == other.metadata
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == b.shape and a.astype("<f4").tobytes() == b.astype("<f4").tobytes()
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.metadata)
    meta["stage"] = ckpt.stage
    meta["tensor_count"] = len(ckpt.tensors)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", ckpt.version, len(meta_bytes)), meta_bytes]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CorruptCheckpoint("missing RPLN magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptCheckpoint("checkpoint truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack("<Q", take(8))
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable metadata: {exc}") from exc
    count = meta.pop("tensor_count", None)
    stage = meta.pop("stage", None)
    if count is None or stage is None:
        raise CorruptCheckpoint("metadata lacks stage or tensor_count")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CorruptCheckpoint(f"{len(data) - pos} trailing bytes after last tensor")
    return Checkpoint(stage, tensors, meta, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    try:
        Path(path).write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
