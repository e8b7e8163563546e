"""Least-squares adversarial, cycle and paired objectives.

Expectations are realized as means over patch elements (and over the batch).
Every function works on :class:`Tensor` inputs so the same code serves the
forward value and the gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .tensor import Tensor, absolute, mean, square


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0
    alpha: float = 2.0
    # Scale the generator's paired term by 1/3 like the discriminator's (ablation only).
    normalize_pair: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Scalar losses of one training step.

    ``total_f == adv_f + lam*cyc + alpha*pair`` and likewise for G; the paired
    term is shared by both generators because its three terms are symmetric.
    """

    d_x: float = 0.0
    d_y: float = 0.0
    d_pair: float = 0.0
    adv_g: float = 0.0
    adv_f: float = 0.0
    cyc: float = 0.0
    pair: float = 0.0
    total_g: float = 0.0
    total_f: float = 0.0


def _ls(t: Tensor, target: float) -> Tensor:
    return mean(square(t - target)) if target else mean(square(t))


def loss_disc_single(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean((D(real) - 1)^2) + mean(D(fake)^2)."""
    return _ls(d_real, 1.0) + _ls(d_fake, 0.0)


def loss_gen_adv(d_fake: Tensor) -> Tensor:
    return _ls(d_fake, 1.0)


def loss_cycle(x: Tensor, x_rec: Tensor, y: Tensor, y_rec: Tensor) -> Tensor:
    """L1 reconstruction in both directions, each a mean over pixels."""
    if x.shape != x_rec.shape or y.shape != y_rec.shape:
        raise ValueError(f"cycle loss shape mismatch: {x.shape}/{x_rec.shape}, {y.shape}/{y_rec.shape}")
    return mean(absolute(x_rec - x)) + mean(absolute(y_rec - y))


def loss_disc_pair(d_real_pair: Tensor, d_fake_xy: Tensor, d_fake_fy: Tensor,
                   d_fake_ff: Tensor) -> Tensor:
    """Real pair pushed to 1; the three generated pairings share a 1/3 weight."""
    fakes = _ls(d_fake_xy, 0.0) + _ls(d_fake_fy, 0.0) + _ls(d_fake_ff, 0.0)
    return _ls(d_real_pair, 1.0) + fakes * (1.0 / 3.0)


def loss_gen_pair(d_fake_xy: Tensor, d_fake_fy: Tensor, d_fake_ff: Tensor,
                  normalize: bool = False) -> Tensor:
    """Sum (no 1/3 factor unless ``normalize``) of the three fooling terms."""
    total = _ls(d_fake_xy, 1.0) + _ls(d_fake_fy, 1.0) + _ls(d_fake_ff, 1.0)
    return total * (1.0 / 3.0) if normalize else total


def loss_gen_total(adv, cyc, pair, weights: LossWeights):
    """adv + lam*cyc + alpha*pair; accepts floats or Tensors."""
    return adv + cyc * weights.lam + pair * weights.alpha


def generator_objective(d_fake: Tensor, cyc: Tensor, pair, weights: LossWeights):
    """One direction's full generator loss.

    Called once per direction with the roles of (X, G, D_Y) and (Y, F, D_X)
    swapped; returns ``(total, adv)``.
    """
    adv = loss_gen_adv(d_fake)
    return loss_gen_total(adv, cyc, pair, weights), adv
