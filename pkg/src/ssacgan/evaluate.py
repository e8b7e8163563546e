"""Reconstruction metrics, multi-seed aggregation, noise sweeps and reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Volume, add_gaussian_noise
from .optim import Rng

DIRECTIONS = ("x2y", "y2x")
DEFAULT_SIGMAS = (0.025, 0.05, 0.1, 0.2, 0.4)

Translator = Callable[[np.ndarray], np.ndarray]


def _voxels(v) -> np.ndarray:
    return v.voxels if isinstance(v, Volume) else np.asarray(v)


def _diff(a, b) -> np.ndarray:
    a, b = _voxels(a), _voxels(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64) - b.astype(np.float64)


def mse(a, b) -> float:
    d = _diff(a, b)
    return float(np.mean(d * d))


def mae(a, b) -> float:
    return float(np.mean(np.abs(_diff(a, b))))


def aggregate_runs(values: Sequence[float]) -> Tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ValueError("aggregate_runs needs at least two values")
    return float(np.mean(values)), float(np.std(values, ddof=1))


@dataclass
class TestSubject:
    subject_id: str
    x: Volume
    y: Volume


def _source_target(subject: TestSubject, direction: str):
    if direction == "x2y":
        return subject.x, subject.y
    if direction == "y2x":
        return subject.y, subject.x
    raise ValueError(f"unknown direction {direction!r}")


def evaluate_direction(translate: Translator, test_set: Sequence[TestSubject],
                       direction: str) -> Tuple[float, float]:
    """Translate every test volume slice-wise; per-volume metrics averaged over subjects.

    ``translate`` maps a stack of slices (S, H, W) to a stack of the same shape,
    e.g. ``partial(bundle.translate, direction="x2y")``.
    """
    if not test_set:
        raise ValueError("empty test set")
    errs = []
    for subject in test_set:
        src, tgt = _source_target(subject, direction)
        pred = np.asarray(translate(src.voxels), dtype=np.float32)
        errs.append((mse(pred, tgt), mae(pred, tgt)))
    errs = np.array(errs)
    return float(errs[:, 0].mean()), float(errs[:, 1].mean())


@dataclass
class MetricsReport:
    regime: str
    direction: str
    per_seed: Dict[int, Tuple[float, float]] = field(default_factory=dict)

    def add(self, seed: int, mse_value: float, mae_value: float) -> None:
        self.per_seed[int(seed)] = (float(mse_value), float(mae_value))

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed)

    def summary(self) -> dict:
        mses = [v[0] for v in self.per_seed.values()]
        maes = [v[1] for v in self.per_seed.values()]
        if len(mses) >= 2:
            mse_mean, mse_std = aggregate_runs(mses)
            mae_mean, mae_std = aggregate_runs(maes)
        else:
            mse_mean, mae_mean = mses[0], maes[0]
            mse_std = mae_std = float("nan")
        return {"regime": self.regime, "direction": self.direction, "n_seeds": len(mses),
                "mse_mean": mse_mean, "mse_std": mse_std, "mae_mean": mae_mean, "mae_std": mae_std}


@dataclass
class NoiseSweepResult:
    sigmas: List[float]
    values: Dict[float, List[float]]

    def __post_init__(self):
        if not self.sigmas:
            raise ValueError("empty sigma grid")
        if any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigma grid must be strictly increasing")

    def mean(self, sigma: float) -> float:
        return float(np.mean(self.values[sigma]))

    def std(self, sigma: float) -> float:
        vals = self.values[sigma]
        return float(np.std(vals, ddof=1)) if len(vals) >= 2 else float("nan")

    def means(self) -> List[float]:
        return [self.mean(s) for s in self.sigmas]

    def merge(self, other: "NoiseSweepResult") -> "NoiseSweepResult":
        if list(other.sigmas) != list(self.sigmas):
            raise ValueError("cannot merge sweeps over different grids")
        return NoiseSweepResult(list(self.sigmas),
                                {s: self.values[s] + other.values[s] for s in self.sigmas})


def noise_sweep(translate: Translator, test_set: Sequence[TestSubject], sigmas: Sequence[float],
                seeds: Sequence[int], direction: str = "x2y") -> NoiseSweepResult:
    """MAE against clean targets after corrupting the inputs with N(0, sigma^2)."""
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ValueError("empty sigma grid")
    if not test_set:
        raise ValueError("empty test set")
    values: Dict[float, List[float]] = {s: [] for s in sigmas}
    for seed in seeds:
        for sigma in sigmas:
            rng = Rng(int(seed)).child(f"noise:{sigma!r}")
            errs = []
            for subject in test_set:
                src, tgt = _source_target(subject, direction)
                noisy = add_gaussian_noise(src, sigma, rng.child(subject.subject_id))
                errs.append(mae(np.asarray(translate(noisy.voxels), dtype=np.float32), tgt))
            values[sigma].append(float(np.mean(errs)))
    return NoiseSweepResult(sigmas, values)


# -- report files --------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def emit_report(reports: Sequence[MetricsReport], path_prefix,
                sweeps: Optional[Dict[str, NoiseSweepResult]] = None) -> List[Path]:
    """Write metrics.csv, metrics_summary.csv and (if any sweep) noise_sweep.csv + .svg."""
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(path_prefix)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    written = []

    path = out / "metrics.csv"
    _write_csv(path, ("regime", "direction", "seed", "mse", "mae"),
               ((r.regime, r.direction, s, m[0], m[1])
                for r in reports for s, m in sorted(r.per_seed.items())))
    written.append(path)

    path = out / "metrics_summary.csv"
    cols = ("regime", "direction", "n_seeds", "mse_mean", "mse_std", "mae_mean", "mae_std")
    _write_csv(path, cols, ([r.summary()[c] for c in cols] for r in reports))
    written.append(path)

    sweeps = {k: v for k, v in (sweeps or {}).items() if v is not None}
    if sweeps:
        path = out / "noise_sweep.csv"
        _write_csv(path, ("regime", "sigma", "n", "mae_mean", "mae_std"),
                   ((regime, s, len(sw.values[s]), sw.mean(s), sw.std(s))
                    for regime, sw in sweeps.items() for s in sw.sigmas))
        written.append(path)
        written.append(plot_noise_sweep(sweeps, out / "noise_sweep.svg"))
    return written


def plot_noise_sweep(sweeps: Dict[str, NoiseSweepResult], path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ssacgan"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for regime, sw in sweeps.items():
        means = np.array(sw.means())
        stds = np.array([sw.std(s) for s in sw.sigmas])
        ax.plot(sw.sigmas, means, marker="o", label=regime)
        if np.all(np.isfinite(stds)):
            ax.fill_between(sw.sigmas, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("noise sigma")
    ax.set_ylabel("MAE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


def read_metrics(path) -> Dict[Tuple[str, str], MetricsReport]:
    reports: Dict[Tuple[str, str], MetricsReport] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["regime"], row["direction"])
            rep = reports.setdefault(key, MetricsReport(*key))
            rep.add(int(row["seed"]), float(row["mse"]), float(row["mae"]))
    return reports


def is_monotone(values: Sequence[float], tolerance: float = 0.0, max_inversions: int = 0) -> bool:
    """Non-decreasing, allowing ``max_inversions`` drops each within ``tolerance`` (relative)."""
    inversions = 0
    for a, b in zip(values, values[1:]):
        if b < a:
            if (a - b) > tolerance * abs(a):
                return False
            inversions += 1
    return inversions <= max_inversions
