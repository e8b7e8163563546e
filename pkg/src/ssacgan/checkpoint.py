"""SSCK checkpoint archives.

Layout (little endian)::

    b"SSCK"  u16 version  u32 record_count
    record_count x [u32 name_len, name (utf-8), u8 rank, rank x u32 dims, f32 payload]

Scalars (epoch, step counts) and integers too wide for float32 (seeds, the
config hash) are stored as 1-element or 16-bit-limb records under ``meta.``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"SSCK"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or unreadable archive."""


class CheckpointVersionError(CheckpointError):
    pass


def int_to_limbs(value: int, n: int = 4) -> np.ndarray:
    """Split a non-negative integer < 2**(16n) into float32-exact 16-bit limbs."""
    if not 0 <= value < 2 ** (16 * n):
        raise ValueError(f"{value} does not fit in {n} 16-bit limbs")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(n)], dtype=np.float32)


def limbs_to_int(limbs: np.ndarray) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(np.asarray(limbs).ravel()))


def encode_records(records: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=np.float32)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def decode_records(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:4] != MAGIC:
        raise CheckpointError("corrupt archive: bad magic")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("corrupt archive: truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt archive: bad record name") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if name in records:
            raise CheckpointError(f"corrupt archive: duplicate record {name!r}")
        records[name] = arr
    if pos != len(blob):
        raise CheckpointError("corrupt archive: trailing bytes")
    return records


def write_records(records: Dict[str, np.ndarray], path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_records(records))
    tmp.replace(path)
    return path


def read_records(path) -> "OrderedDict[str, np.ndarray]":
    return decode_records(Path(path).read_bytes())
