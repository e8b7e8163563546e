"""Training regimes, learning-rate schedule, update ordering and checkpoints.

Regimes:

* ``cycle``: unpaired slices only, no paired discriminator term.
* ``paired_only``: only the paired subset, full objective (the "-p" ablation).
* ``semi``: unpaired batches with a paired batch every k-th step,
  ``k = ceil(#unpaired_x / #paired)``.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import checkpoint as ck
from .data import default_max_shift, random_shift
from .losses import (LossBreakdown, LossWeights, generator_objective, loss_cycle,
                     loss_disc_pair, loss_disc_single, loss_gen_pair)
from .nets import ArchConfig, ModelBundle
from .optim import Adam, AdamState, Rng
from .tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)

REGIMES = ("cycle", "paired_only", "semi")
LOG_COLUMNS = ("epoch", "step", "loss_dx", "loss_dy", "loss_dpair", "loss_g_total",
               "loss_f_total", "adv_f", "cyc", "pair_f", "lr")
FINAL_CHECKPOINT = "checkpoint.ssck"
LOSS_LOG = "loss_log.csv"


class DivergenceError(FloatingPointError):
    """A loss became NaN or infinite; training is aborted."""


class ConfigMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    regime: str = "semi"
    epochs: int = 200
    lr_start: float = 2e-4
    lr_end: float = 2e-7
    lr_constant_epochs: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 1
    seed: Optional[int] = None
    max_shift: Optional[int] = None
    checkpoint_every: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if not self.epochs > self.lr_constant_epochs >= 0:
            raise ValueError("need epochs > lr_constant_epochs >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_shift is not None and self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        doc = dict(doc)
        if isinstance(doc.get("weights"), dict):
            _reject_unknown(doc["weights"], LossWeights, "weights")
            doc["weights"] = LossWeights(**doc["weights"])
        if isinstance(doc.get("arch"), dict):
            _reject_unknown(doc["arch"], ArchConfig, "arch")
            doc["arch"] = ArchConfig(**doc["arch"])
        return cls(**doc)

    def config_hash(self) -> int:
        """64-bit digest of every setting that shapes the run (seed included)."""
        doc = {k: v for k, v in self.to_dict().items() if k != "checkpoint_every"}
        digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()
        return int.from_bytes(digest[:8], "little")


def _reject_unknown(doc: dict, klass, section: str) -> None:
    unknown = set(doc) - {f.name for f in dataclasses.fields(klass)}
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")


def lr_at_epoch(e: int, cfg: TrainConfig) -> float:
    """Constant for ``lr_constant_epochs`` epochs, then linear down to ``lr_end``."""
    if not 0 <= e < cfg.epochs:
        raise ValueError(f"epoch {e} outside [0, {cfg.epochs})")
    if e < cfg.lr_constant_epochs:
        return cfg.lr_start
    frac = (e - (cfg.lr_constant_epochs - 1)) / (cfg.epochs - cfg.lr_constant_epochs)
    if frac >= 1.0:
        return cfg.lr_end
    return cfg.lr_start + frac * (cfg.lr_end - cfg.lr_start)


# -- data --------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Normalized 2-D slices, shaped (n, H, W)."""

    unpaired_x: np.ndarray
    unpaired_y: np.ndarray
    paired_x: np.ndarray
    paired_y: np.ndarray

    def __post_init__(self):
        for name in ("unpaired_x", "unpaired_y", "paired_x", "paired_y"):
            arr = np.asarray(getattr(self, name), dtype=DTYPE)
            if arr.ndim != 3:
                raise ValueError(f"{name} must be (n, H, W), got {arr.shape}")
            setattr(self, name, arr)
        if len(self.paired_x) != len(self.paired_y):
            raise ValueError("paired_x and paired_y differ in length")


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    is_paired: bool


def steps_per_epoch(cfg: TrainConfig, data: TrainingData) -> int:
    n = len(data.paired_x) if cfg.regime == "paired_only" else len(data.unpaired_x)
    return math.ceil(n / cfg.batch_size)


def check_data(cfg: TrainConfig, data: TrainingData) -> None:
    if cfg.regime == "paired_only":
        if len(data.paired_x) == 0:
            raise ValueError("paired_only regime needs a non-empty paired subset")
    elif len(data.unpaired_x) == 0 or len(data.unpaired_y) == 0:
        raise ValueError(f"{cfg.regime} regime needs non-empty unpaired X and Y subsets")


def epoch_batches(cfg: TrainConfig, data: TrainingData, epoch: int) -> Iterator[Batch]:
    """Deterministic batch sequence of one epoch (shuffle + shift augmentation)."""
    rng = Rng(cfg.seed).child("train").child(f"epoch:{epoch}")
    order_rng, shift_rng = rng.child("order"), rng.child("shift")
    size = data.unpaired_x.shape[-1] if len(data.unpaired_x) else data.paired_x.shape[-1]
    max_shift = default_max_shift(size) if cfg.max_shift is None else cfg.max_shift
    bs = cfg.batch_size
    n_steps = steps_per_epoch(cfg, data)

    def paired(indices) -> Batch:
        xs, ys = [], []
        for i in indices:
            x, y, _ = random_shift(data.paired_x[i], data.paired_y[i], max_shift, shift_rng)
            xs.append(x)
            ys.append(y)
        return Batch(np.stack(xs)[:, None], np.stack(ys)[:, None], True)

    if cfg.regime == "paired_only":
        n_p = len(data.paired_x)
        perm = order_rng.permutation(n_p)
        for step in range(n_steps):
            yield paired(perm[step * bs:(step + 1) * bs])
        return

    n_x, n_y, n_p = len(data.unpaired_x), len(data.unpaired_y), len(data.paired_x)
    perm_x = order_rng.permutation(n_x)
    perm_y = order_rng.permutation(n_y)
    use_pairs = cfg.regime == "semi" and n_p > 0
    if use_pairs:
        perm_p = order_rng.permutation(n_p)
        k = math.ceil(n_x / n_p)
    used_x = used_p = 0
    for step in range(n_steps):
        if use_pairs and (step + 1) % k == 0:
            yield paired([perm_p[(used_p + t) % n_p] for t in range(bs)])
            used_p += bs
            continue
        xs, ys = [], []
        for t in range(bs):
            xi = perm_x[(used_x + t) % n_x]
            yi = perm_y[(used_x + t) % n_y]
            xs.append(random_shift(data.unpaired_x[xi], None, max_shift, shift_rng)[0])
            ys.append(random_shift(data.unpaired_y[yi], None, max_shift, shift_rng)[0])
        used_x += bs
        yield Batch(np.stack(xs)[:, None], np.stack(ys)[:, None], False)


# -- model state ------------------------------------------------------------------

def build_optimizers(bundle: ModelBundle) -> Dict[str, Adam]:
    """One Adam per network; D_pair's also covers the shared D_X/D_Y trunks."""
    return {
        "G": Adam(bundle.G.parameters()),
        "F": Adam(bundle.F.parameters()),
        "D_X": Adam(bundle.D_X.parameters()),
        "D_Y": Adam(bundle.D_Y.parameters()),
        "D_pair": Adam(bundle.D_pair.parameters() + bundle.D_X.trunk_parameters()
                       + bundle.D_Y.trunk_parameters()),
    }


@dataclass
class TrainState:
    bundle: ModelBundle
    optimizers: Dict[str, Adam]
    epoch: int
    seed: int
    regime: str
    config_hash: int

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        if cfg.seed is None:
            raise ValueError("a seed is required")
        bundle = ModelBundle(cfg.seed, cfg.arch)
        return cls(bundle, build_optimizers(bundle), 0, cfg.seed, cfg.regime, cfg.config_hash())


def state_records(state: TrainState) -> Dict[str, np.ndarray]:
    rec: Dict[str, np.ndarray] = {}
    arch = state.bundle.arch
    rec["meta.arch"] = np.array([arch.ngf, arch.ndf, arch.n_res], dtype=np.float32)
    rec["meta.epoch"] = np.array([state.epoch], dtype=np.float32)
    rec["meta.seed"] = ck.int_to_limbs(state.seed)
    rec["meta.regime"] = np.array([REGIMES.index(state.regime)], dtype=np.float32)
    rec["meta.config_hash"] = ck.int_to_limbs(state.config_hash)
    for name, p in state.bundle.named_parameters():
        rec[f"param.{name}"] = p.data
    for opt_name, opt in state.optimizers.items():
        s = opt.state
        rec[f"adam.{opt_name}.step"] = np.array([s.step_count], dtype=np.float32)
        rec[f"adam.{opt_name}.hyper"] = np.array([s.beta1, s.beta2, s.epsilon], dtype=np.float32)
        for i, (m, v) in enumerate(zip(s.first_moment, s.second_moment)):
            rec[f"adam.{opt_name}.m.{i}"] = m
            rec[f"adam.{opt_name}.v.{i}"] = v
    return rec


def save_checkpoint(state: TrainState, path) -> Path:
    return ck.write_records(state_records(state), path)


def load_checkpoint(path) -> TrainState:
    rec = ck.read_records(path)
    try:
        ngf, ndf, n_res = (int(v) for v in rec["meta.arch"])
        seed = ck.limbs_to_int(rec["meta.seed"])
        bundle = ModelBundle(seed, ArchConfig(ngf, ndf, n_res))
        bundle.load_state_dict({k[len("param."):]: v for k, v in rec.items() if k.startswith("param.")})
        optimizers = build_optimizers(bundle)
        for opt_name, opt in optimizers.items():
            b1, b2, eps = (float(v) for v in rec[f"adam.{opt_name}.hyper"])
            n = len(opt.params)
            opt.state = AdamState([rec[f"adam.{opt_name}.m.{i}"].copy() for i in range(n)],
                                  [rec[f"adam.{opt_name}.v.{i}"].copy() for i in range(n)],
                                  int(rec[f"adam.{opt_name}.step"][0]), b1, b2, eps)
            for p, m in zip(opt.params, opt.state.first_moment):
                if m.shape != p.shape:
                    raise ValueError(f"optimizer {opt_name} moment shape {m.shape} != {p.shape}")
        return TrainState(bundle, optimizers, int(rec["meta.epoch"][0]), seed,
                          REGIMES[int(rec["meta.regime"][0])], ck.limbs_to_int(rec["meta.config_hash"]))
    except (KeyError, ValueError, IndexError) as exc:
        raise ck.CheckpointError(f"corrupt archive {path}: {exc}") from exc


# -- one update -------------------------------------------------------------------

@contextlib.contextmanager
def frozen(params: Sequence[Tensor]):
    """Exclude ``params`` from gradient computation inside the block."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what} loss ({value})")
    return value


def train_step(bundle: ModelBundle, optimizers: Dict[str, Adam], batch: Batch,
               cfg: TrainConfig, lr: float) -> LossBreakdown:
    """Alternating update: D_X, D_Y, D_pair (paired steps only), then G and F jointly."""
    w = cfg.weights
    use_pair = batch.is_paired and cfg.regime != "cycle"
    x, y = Tensor(batch.x), Tensor(batch.y)
    out = LossBreakdown()

    fake_y = bundle.G(x)
    fake_x = bundle.F(y)
    fake_y_const, fake_x_const = fake_y.detach(), fake_x.detach()

    opt = optimizers["D_X"]
    opt.zero_grad()
    loss = loss_disc_single(bundle.D_X(x)[0], bundle.D_X(fake_x_const)[0])
    out.d_x = _finite(loss.item(), "D_X")
    loss.backward()
    opt.step(lr)

    opt = optimizers["D_Y"]
    opt.zero_grad()
    loss = loss_disc_single(bundle.D_Y(y)[0], bundle.D_Y(fake_y_const)[0])
    out.d_y = _finite(loss.item(), "D_Y")
    loss.backward()
    opt.step(lr)

    if use_pair:
        opt = optimizers["D_pair"]
        opt.zero_grad()
        fx_real, fy_real = bundle.D_X.trunk(x), bundle.D_Y.trunk(y)
        fx_fake, fy_fake = bundle.D_X.trunk(fake_x_const), bundle.D_Y.trunk(fake_y_const)
        loss = loss_disc_pair(bundle.D_pair(fx_real, fy_real), bundle.D_pair(fx_real, fy_fake),
                              bundle.D_pair(fx_fake, fy_real), bundle.D_pair(fx_fake, fy_fake))
        out.d_pair = _finite(loss.item(), "D_pair")
        loss.backward()
        opt.step(lr)

    disc_params = bundle.D_X.parameters() + bundle.D_Y.parameters() + bundle.D_pair.parameters()
    with frozen(disc_params):
        optimizers["G"].zero_grad()
        optimizers["F"].zero_grad()
        map_y, feat_fake_y = bundle.D_Y(fake_y)
        map_x, feat_fake_x = bundle.D_X(fake_x)
        cyc = loss_cycle(x, bundle.F(fake_y), y, bundle.G(fake_x))
        pair = 0.0
        if use_pair:
            feat_x, feat_y = bundle.D_X.trunk(x), bundle.D_Y.trunk(y)
            pair = loss_gen_pair(bundle.D_pair(feat_x, feat_fake_y),
                                 bundle.D_pair(feat_fake_x, feat_y),
                                 bundle.D_pair(feat_fake_x, feat_fake_y),
                                 normalize=w.normalize_pair)
        total_g, adv_g = generator_objective(map_y, cyc, pair, w)
        total_f, adv_f = generator_objective(map_x, cyc, pair, w)
        # Each generator's own loss has the same gradient as this sum w.r.t. its
        # parameters: adv_g does not depend on F, adv_f does not depend on G.
        joint = adv_g + adv_f + cyc * w.lam
        if use_pair:
            joint = joint + pair * w.alpha
        _finite(joint.item(), "generator")
        joint.backward()
        optimizers["G"].step(lr)
        optimizers["F"].step(lr)

    out.adv_g = _finite(adv_g.item(), "G adversarial")
    out.adv_f = _finite(adv_f.item(), "F adversarial")
    out.cyc = _finite(cyc.item(), "cycle")
    out.pair = _finite(pair.item(), "paired") if use_pair else 0.0
    out.total_g = _finite(total_g.item(), "G total")
    out.total_f = _finite(total_f.item(), "F total")
    return out


# -- the run ---------------------------------------------------------------------

def log_row(epoch: int, step: int, b: LossBreakdown, lr: float) -> dict:
    return {"epoch": epoch, "step": step, "loss_dx": b.d_x, "loss_dy": b.d_y,
            "loss_dpair": b.d_pair, "loss_g_total": b.total_g, "loss_f_total": b.total_f,
            "adv_f": b.adv_f, "cyc": b.cyc, "pair_f": b.pair, "lr": lr}


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])
    return buf.getvalue()


def read_log(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()} for r in rows]


def resume_state(path, cfg: TrainConfig, allow_mismatch: bool = False) -> TrainState:
    state = load_checkpoint(path)
    if state.config_hash != cfg.config_hash():
        msg = f"config hash of {path} does not match the current configuration"
        if not allow_mismatch:
            raise ConfigMismatchError(msg + " (pass allow_mismatch to resume anyway)")
        warnings.warn(msg + "; resuming anyway", RuntimeWarning, stacklevel=2)
        state.config_hash = cfg.config_hash()
        state.regime = cfg.regime
    return state


def run_training(cfg: TrainConfig, data: TrainingData, out_dir=None,
                 state: Optional[TrainState] = None, prior_rows: Sequence[dict] = (),
                 on_epoch: Optional[Callable[[int, List[dict]], None]] = None):
    """Train ``cfg.epochs`` epochs (continuing from ``state`` if given).

    Returns ``(final_state, loss_rows)``; with ``out_dir`` the loss log and the
    checkpoints are written there as well.
    """
    check_data(cfg, data)
    if state is None:
        state = TrainState.fresh(cfg)
    rows = [r for r in prior_rows if r["epoch"] < state.epoch]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(state.epoch, cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        epoch_rows = []
        for step, batch in enumerate(epoch_batches(cfg, data, epoch)):
            try:
                losses = train_step(state.bundle, state.optimizers, batch, cfg, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
            epoch_rows.append(log_row(epoch, step, losses, lr))
        rows.extend(epoch_rows)
        state.epoch = epoch + 1
        logger.info("epoch %d/%d lr=%.3g cyc=%.4f d_x=%.4f", epoch + 1, cfg.epochs, lr,
                    np.mean([r["cyc"] for r in epoch_rows]), np.mean([r["loss_dx"] for r in epoch_rows]))
        if on_epoch is not None:
            on_epoch(epoch, epoch_rows)
        if out is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0 \
                and state.epoch < cfg.epochs:
            save_checkpoint(state, out / f"checkpoint-epoch{state.epoch:04d}.ssck")
            (out / LOSS_LOG).write_text(format_log(rows))

    if out is not None:
        save_checkpoint(state, out / FINAL_CHECKPOINT)
        (out / LOSS_LOG).write_text(format_log(rows))
    return state, rows
