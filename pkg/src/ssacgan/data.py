"""Volumes, the SSAV file format, preprocessing, splitting and augmentation."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .optim import Rng

DTYPE = np.float32
MAGIC = b"SSAV"
VERSION = 1
_HEADER = struct.Struct("<4sHBB3I")

SPLIT_KEYS = ("unpaired_x", "unpaired_y", "paired", "validation", "test")
DEFAULT_RATIOS = (0.3, 0.3, 0.1, 0.1, 0.2)


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DtypeMismatchError(VolumeFormatError):
    pass


@dataclass
class Volume:
    voxels: np.ndarray
    subject_id: str = ""
    modality: str = ""
    meta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=DTYPE)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-d (depth, height, width), got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError(f"volume {self.subject_id}/{self.modality} has non-finite voxels")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray, **meta) -> "Volume":
        return Volume(voxels, self.subject_id, self.modality, {**self.meta, **meta})


# -- file format ------------------------------------------------------------------

def encode_volume(v: Volume) -> bytes:
    d, h, w = v.dims
    header = _HEADER.pack(MAGIC, VERSION, 0, 3, d, h, w)
    return header + v.voxels.astype("<f4").tobytes(order="C")


def decode_volume(blob: bytes, subject_id: str = "", modality: str = "") -> Volume:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("bad magic: not an SSAV volume file")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError("truncated payload: header incomplete")
    _, version, dtype, rank, d, h, w = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported SSAV version {version}")
    if dtype != 0:
        raise DtypeMismatchError(f"dtype mismatch: code {dtype}, expected 0 (float32)")
    if rank != 3:
        raise VolumeFormatError(f"unsupported rank {rank}")
    expected = d * h * w * 4
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"truncated payload: header declares {expected} bytes, found {len(payload)}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(DTYPE)
    return Volume(voxels, subject_id, modality)


def volume_filename(subject_id: str, modality: str) -> str:
    return f"{subject_id}_{modality}.ssav"


def save_volume(v: Volume, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_volume(v))
    return path


def load_volume(path, subject_id: Optional[str] = None, modality: Optional[str] = None) -> Volume:
    path = Path(path)
    if subject_id is None or modality is None:
        stem_sub, _, stem_mod = path.stem.rpartition("_")
        subject_id = subject_id if subject_id is not None else stem_sub
        modality = modality if modality is not None else stem_mod
    return decode_volume(path.read_bytes(), subject_id, modality)


# -- preprocessing -----------------------------------------------------------------

def normalize_volume(v: Volume) -> Volume:
    """Z-score over the whole volume (population std), then min-max onto [-1, 1].

    The affine map applied is recorded in ``meta`` as ``norm_scale`` and
    ``norm_offset`` (normalized = raw * scale + offset).
    """
    raw = v.voxels.astype(np.float64)
    std = raw.std()
    if std == 0.0:
        raise ValueError(f"cannot normalize constant volume {v.subject_id}/{v.modality}")
    z = (raw - raw.mean()) / std
    lo, hi = z.min(), z.max()
    out = (z - lo) / (hi - lo) * 2.0 - 1.0
    scale = 2.0 / (std * (hi - lo))
    offset = -1.0 - (raw.mean() / std + lo) * 2.0 / (hi - lo)
    return v.with_voxels(out.astype(DTYPE), norm_scale=float(scale), norm_offset=float(offset))


def foreground_fraction(slice_: np.ndarray) -> float:
    """Fraction of pixels above the slice's background (its minimum)."""
    return float(np.mean(slice_ > slice_.min()))


def training_slices(v: Volume, min_foreground: float = 0.01) -> np.ndarray:
    """Slices along the first axis whose foreground fraction is >= ``min_foreground``."""
    keep = [s for s in v.voxels if foreground_fraction(s) >= min_foreground]
    if not keep:
        return np.zeros((0,) + v.dims[1:], dtype=DTYPE)
    return np.stack(keep)


# -- splitting -----------------------------------------------------------------------

@dataclass
class DatasetSplit:
    unpaired_x: List[str]
    unpaired_y: List[str]
    paired: List[str]
    validation: List[str]
    test: List[str]
    seed: Optional[int] = None

    def buckets(self) -> Dict[str, List[str]]:
        return {k: list(getattr(self, k)) for k in SPLIT_KEYS}

    def sizes(self) -> Tuple[int, ...]:
        return tuple(len(getattr(self, k)) for k in SPLIT_KEYS)

    def to_json(self) -> dict:
        subjects = sorted(s for k in SPLIT_KEYS for s in getattr(self, k))
        return {"subjects": subjects, "seed": self.seed, **self.buckets()}

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetSplit":
        unknown = set(doc) - set(SPLIT_KEYS) - {"subjects", "seed", "ratios"}
        if unknown:
            raise ValueError(f"unknown split keys: {sorted(unknown)}")
        split = cls(*(list(doc[k]) for k in SPLIT_KEYS), seed=doc.get("seed"))
        split.validate(doc.get("subjects"))
        return split

    def validate(self, subjects: Optional[Sequence[str]] = None) -> None:
        seen: Dict[str, str] = {}
        for key in SPLIT_KEYS:
            for s in getattr(self, key):
                if s in seen:
                    raise ValueError(f"subject {s!r} is in both {seen[s]} and {key}")
                seen[s] = key
        if subjects is not None and set(subjects) != set(seen):
            raise ValueError("split buckets do not cover the subject list exactly")


def apportion(n: int, ratios: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to earlier buckets."""
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    short = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-round(remainders[i], 9), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def split_dataset(subject_ids: Sequence[str], rng: Rng,
                  ratios: Sequence[float] = DEFAULT_RATIOS) -> DatasetSplit:
    """Shuffle subjects then cut them into the five buckets (subject-level, no leakage)."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    if len(ratios) != len(SPLIT_KEYS) or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("ratios must be five non-negative numbers with a positive sum")
    if len(ids) < 5:
        raise ValueError(f"need at least 5 subjects to split, got {len(ids)}")
    counts = apportion(len(ids), ratios)
    for key, r, c in zip(SPLIT_KEYS, ratios, counts):
        if r > 0 and c == 0:
            raise ValueError(f"{len(ids)} subjects are too few to give bucket {key!r} a subject")
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    parts, start = [], 0
    for c in counts:
        parts.append(shuffled[start:start + c])
        start += c
    return DatasetSplit(*parts, seed=rng.seed)


def save_json(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_split(path) -> DatasetSplit:
    return DatasetSplit.from_json(json.loads(Path(path).read_text()))


# -- augmentation and corruption ------------------------------------------------

def default_max_shift(extent: int) -> int:
    return int(extent * 0.05)


def shift_image(img: np.ndarray, dy: int, dx: int, fill: float = 0.0) -> np.ndarray:
    """Integer translation of the last two axes; vacated pixels get ``fill``."""
    out = np.full_like(img, fill)
    h, w = img.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = img[..., src_y, src_x]
    return out


def random_shift(x: np.ndarray, y: Optional[np.ndarray], max_shift: int, rng: Rng,
                 fill: float = 0.0):
    """Shift ``x`` (and the paired ``y`` by the same offset) uniformly in [-m, m]^2.

    Returns ``(x_shifted, y_shifted_or_None, (dy, dx))``.
    """
    h, w = x.shape[-2:]
    if max_shift < 0 or max_shift >= min(h, w):
        raise ValueError(f"max_shift {max_shift} must lie in [0, {min(h, w)})")
    if max_shift == 0:
        return x, y, (0, 0)
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    xs = shift_image(x, dy, dx, fill)
    ys = None if y is None else shift_image(y, dy, dx, fill)
    return xs, ys, (dy, dx)


def add_gaussian_noise(v, sigma: float, rng: Rng):
    """Add i.i.d. N(0, sigma^2) to every voxel; accepts a Volume or an array."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    arr = v.voxels if isinstance(v, Volume) else np.asarray(v, dtype=DTYPE)
    if sigma == 0:
        noisy = arr.copy()
    else:
        noisy = (arr + rng.normal(0.0, sigma, size=arr.shape)).astype(DTYPE)
    return v.with_voxels(noisy, noise_sigma=float(sigma)) if isinstance(v, Volume) else noisy
