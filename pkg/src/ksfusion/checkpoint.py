"""Single-file checkpoints.

Layout (little-endian): ``b"SFCK"``, u32 format version, u32 metadata
length, UTF-8 JSON metadata, u32 entry count, then per entry a u32 key
length, the UTF-8 key, u32 ndim, ndim x u32 dims and the float64 payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

MAGIC = b"SFCK"
VERSION = 1


class CheckpointVersionError(DataFormatError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]
    version: int = VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Entries under ``prefix/`` with the prefix stripped."""
        head = prefix + "/"
        return {k[len(head) :]: v for k, v in self.tensors.items() if k.startswith(head)}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for key, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_key = key.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_key)) + raw_key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: missing file")
    raw = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DataFormatError(f"{path}: offset {pos}: truncated, expected {n} more bytes, got {len(raw) - pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise DataFormatError(f"{path}: offset 0: bad magic")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: bad metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        key = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[key] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(raw):
        raise DataFormatError(f"{path}: offset {pos}: {len(raw) - pos} trailing bytes")
    return Checkpoint(meta, tensors, version)
