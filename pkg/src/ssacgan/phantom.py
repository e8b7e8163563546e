"""Synthetic two-modality head phantoms.

Modality A is a stack of nested ellipsoids (skull ring, brain, inner
structures, optional bright lesion) on a zero background.  Modality B is a
fixed, invertible transform of A inside the head: contrast inversion about
``inversion_level`` followed by a smooth multiplicative bias field.  Both
share the same support, so the translation task is well posed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Tuple

import numpy as np

from .data import Volume
from .optim import Rng

DTYPE = np.float32

SKULL_INTENSITY = 0.2
BRAIN_INTENSITY = 0.8
INNER_RANGE = (0.3, 0.7)
LESION_INTENSITY = 1.0
LESION_THRESHOLD = 0.95


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 64
    depth: int = 4
    ellipse_count: Tuple[int, int] = (3, 6)
    lesion_probability: float = 0.5
    inversion_level: float = 1.2
    bias_amplitude: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.ellipse_count
        if self.image_size < 8 or self.depth < 1:
            raise ValueError("image_size must be >= 8 and depth >= 1")
        if not 0 <= lo <= hi:
            raise ValueError("ellipse_count must be an ordered (min, max) pair")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ValueError("lesion_probability must lie in [0, 1]")
        if self.inversion_level <= LESION_INTENSITY:
            raise ValueError("inversion_level must exceed the lesion intensity to keep B positive")
        if not 0.0 <= self.bias_amplitude < 1.0:
            raise ValueError("bias_amplitude must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ellipse_count"] = list(self.ellipse_count)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        doc = dict(doc)
        if "ellipse_count" in doc:
            doc["ellipse_count"] = tuple(int(v) for v in doc["ellipse_count"])
        return cls(**doc)


def bias_field(size: int, amplitude: float) -> np.ndarray:
    """Smooth multiplicative field in [1 - amplitude, 1 + amplitude]."""
    u = np.linspace(-1.0, 1.0, size)
    v, u = np.meshgrid(u, u, indexing="ij")
    field = 0.5 * u + 0.3 * v + 0.2 * (u * u - v * v)
    return (1.0 + amplitude * field).astype(DTYPE)


def _ellipsoid(grid, center, axes, angle) -> np.ndarray:
    z, y, x = grid
    cz, cy, cx = center
    az, ay, ax = axes
    c, s = np.cos(angle), np.sin(angle)
    yr = (y - cy) * c - (x - cx) * s
    xr = (y - cy) * s + (x - cx) * c
    return ((z - cz) / az) ** 2 + (yr / ay) ** 2 + (xr / ax) ** 2 <= 1.0


def modality_b(a: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    mask = a > 0
    bias = bias_field(spec.image_size, spec.bias_amplitude)
    return np.where(mask, bias * (spec.inversion_level - a), 0.0).astype(DTYPE)


def invert_modality_b(b: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Analytic inverse of :func:`modality_b`."""
    mask = b > 0
    bias = bias_field(spec.image_size, spec.bias_amplitude)
    return np.where(mask, spec.inversion_level - b / bias, 0.0).astype(DTYPE)


def synth_phantom_pair(spec: PhantomSpec, subject_id: str) -> Tuple[Volume, Volume]:
    rng = Rng(spec.seed).child(f"subject:{subject_id}")
    n, d = spec.image_size, spec.depth
    grid = np.meshgrid(np.arange(d) - (d - 1) / 2.0, np.arange(n) - (n - 1) / 2.0,
                       np.arange(n) - (n - 1) / 2.0, indexing="ij")

    jitter = rng.uniform(-0.04, 0.04, size=2) * n
    head_axes = np.array([d * 2.0, *(rng.uniform(0.38, 0.46, size=2) * n)])
    head_angle = rng.uniform(-0.3, 0.3)
    center = (0.0, jitter[0], jitter[1])
    a = np.zeros((d, n, n), dtype=np.float64)
    head = _ellipsoid(grid, center, head_axes, head_angle)
    brain = _ellipsoid(grid, center, head_axes * np.array([1.0, 0.82, 0.82]), head_angle)
    a[head] = SKULL_INTENSITY
    a[brain] = BRAIN_INTENSITY

    inner_axes = head_axes[1:] * 0.82
    count = int(rng.integers(spec.ellipse_count[0], spec.ellipse_count[1] + 1))
    for _ in range(count):
        r = rng.uniform(0.0, 0.55)
        t = rng.uniform(0, 2 * np.pi)
        cy = center[1] + r * inner_axes[0] * np.sin(t)
        cx = center[2] + r * inner_axes[1] * np.cos(t)
        axes = (d * 2.0, *(rng.uniform(0.05, 0.16, size=2) * n))
        shape = _ellipsoid(grid, (0.0, cy, cx), axes, rng.uniform(0, np.pi)) & brain
        a[shape] = rng.uniform(*INNER_RANGE)

    if rng.uniform() < spec.lesion_probability:
        r = rng.uniform(0.0, 0.6)
        t = rng.uniform(0, 2 * np.pi)
        cz = rng.uniform(-(d - 1) / 2.0, (d - 1) / 2.0)
        radius = rng.uniform(0.04, 0.08) * n
        lesion_center = (cz, center[1] + r * inner_axes[0] * np.sin(t),
                         center[2] + r * inner_axes[1] * np.cos(t))
        # Lesions span at least one slice even when radius < 1 in z.
        lesion = _ellipsoid(grid, lesion_center, (max(radius, 1.0), radius, radius), 0.0) & brain
        a[lesion] = LESION_INTENSITY

    a = a.astype(DTYPE)
    b = modality_b(a, spec)
    return (Volume(a, subject_id, "A", {"phantom_seed": spec.seed}),
            Volume(b, subject_id, "B", {"phantom_seed": spec.seed}))


def has_lesion(volume_a: Volume) -> bool:
    return bool(np.any(volume_a.voxels > LESION_THRESHOLD))
