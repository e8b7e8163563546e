"""Glue between files on disk and the training / evaluation code."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import (DEFAULT_RATIOS, DatasetSplit, Volume, load_split, load_volume, normalize_volume,
                   foreground_fraction, save_json, save_volume, split_dataset, volume_filename)
from .evaluate import DEFAULT_SIGMAS, TestSubject
from .optim import Rng
from .phantom import PhantomSpec, synth_phantom_pair
from .trainer import TrainConfig, TrainingData

MANIFEST = "manifest.json"
SPLIT_FILE = "split.json"


class DataError(Exception):
    """Missing or malformed dataset inputs."""


# -- experiment config -------------------------------------------------------------

@dataclass
class DataConfig:
    dir: Optional[str] = None
    split: Optional[str] = None
    split_seed: int = 0
    ratios: Tuple[float, ...] = DEFAULT_RATIOS
    x_modality: str = "A"
    y_modality: str = "B"
    min_foreground: float = 0.01


@dataclass
class EvalConfig:
    sigmas: Tuple[float, ...] = DEFAULT_SIGMAS
    noise_seeds: Tuple[int, ...] = (0,)
    sweep_direction: str = "x2y"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        unknown = set(doc) - {"data", "train", "eval"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        data = _section(DataConfig, doc.get("data", {}), "data")
        if base_dir is not None:
            for attr in ("dir", "split"):
                value = getattr(data, attr)
                if value is not None and not Path(value).is_absolute():
                    setattr(data, attr, str(Path(base_dir) / value))
        data.ratios = tuple(float(r) for r in data.ratios)
        ev = _section(EvalConfig, doc.get("eval", {}), "eval")
        ev.sigmas = tuple(float(s) for s in ev.sigmas)
        ev.noise_seeds = tuple(int(s) for s in ev.noise_seeds)
        return cls(data, TrainConfig.from_dict(doc.get("train", {})), ev)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {"data": dataclasses.asdict(self.data), "train": self.train.to_dict(),
                "eval": dataclasses.asdict(self.eval)}


def _section(klass, doc: dict, name: str):
    unknown = set(doc) - {f.name for f in dataclasses.fields(klass)}
    if unknown:
        raise ValueError(f"unknown {name} keys: {sorted(unknown)}")
    return klass(**doc)


# -- datasets on disk ----------------------------------------------------------------

def synthesize_dataset(spec: PhantomSpec, n_subjects: int, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(n_subjects - 1)))
    subjects = [f"sub-{i:0{width}d}" for i in range(n_subjects)]
    files = {}
    for sid in subjects:
        a, b = synth_phantom_pair(spec, sid)
        files[sid] = {}
        for vol in (a, b):
            name = volume_filename(sid, vol.modality)
            save_volume(vol, out / name)
            files[sid][vol.modality] = name
    manifest = {"spec": spec.to_dict(), "subjects": subjects, "modalities": ["A", "B"], "files": files}
    save_json(manifest, out / MANIFEST)
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise DataError(f"no {MANIFEST} in {data_dir}")
    return json.loads(path.read_text())


def load_subject_volume(data_dir, manifest: dict, subject: str, modality: str) -> Volume:
    try:
        name = manifest["files"][subject][modality]
    except KeyError as exc:
        raise DataError(f"manifest has no {modality} volume for subject {subject}") from exc
    path = Path(data_dir) / name
    if not path.is_file():
        raise DataError(f"missing volume file {path}")
    return load_volume(path, subject, modality)


def resolve_split(cfg: DataConfig, data_dir, manifest: Optional[dict] = None) -> DatasetSplit:
    """Explicit split file, else ``<data>/split.json``, else a fresh split from ``split_seed``."""
    if cfg.split is not None:
        return load_split(cfg.split)
    default = Path(data_dir) / SPLIT_FILE
    if default.is_file():
        return load_split(default)
    manifest = manifest or load_manifest(data_dir)
    return split_dataset(manifest["subjects"], Rng(cfg.split_seed), cfg.ratios)


def _normalized(data_dir, manifest, subject, modality) -> Volume:
    return normalize_volume(load_subject_volume(data_dir, manifest, subject, modality))


def _slices(vol: Volume, keep: np.ndarray) -> np.ndarray:
    return vol.voxels[keep]


def _keep(vol: Volume, min_foreground: float) -> np.ndarray:
    return np.array([foreground_fraction(s) >= min_foreground for s in vol.voxels], dtype=bool)


def build_training_data(cfg: DataConfig, data_dir, split: DatasetSplit) -> TrainingData:
    manifest = load_manifest(data_dir)
    xm, ym, fg = cfg.x_modality, cfg.y_modality, cfg.min_foreground
    h, w = _peek_dims(data_dir, manifest, xm)

    def stack(parts: List[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts) if parts else np.zeros((0, h, w), dtype=np.float32)

    ux = [_slices(v, _keep(v, fg)) for v in (_normalized(data_dir, manifest, s, xm) for s in split.unpaired_x)]
    uy = [_slices(v, _keep(v, fg)) for v in (_normalized(data_dir, manifest, s, ym) for s in split.unpaired_y)]
    px, py = [], []
    for s in split.paired:
        vx, vy = _normalized(data_dir, manifest, s, xm), _normalized(data_dir, manifest, s, ym)
        keep = _keep(vx, fg) & _keep(vy, fg)
        px.append(_slices(vx, keep))
        py.append(_slices(vy, keep))
    return TrainingData(stack(ux), stack(uy), stack(px), stack(py))


def _peek_dims(data_dir, manifest, modality) -> Tuple[int, int]:
    first = manifest["subjects"][0]
    return load_subject_volume(data_dir, manifest, first, modality).dims[1:]


def build_test_set(cfg: DataConfig, data_dir, subjects: Sequence[str]) -> List[TestSubject]:
    manifest = load_manifest(data_dir)
    return [TestSubject(s, _normalized(data_dir, manifest, s, cfg.x_modality),
                        _normalized(data_dir, manifest, s, cfg.y_modality)) for s in subjects]
