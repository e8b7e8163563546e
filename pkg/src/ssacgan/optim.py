"""Random streams, Glorot initialization and the Adam optimizer."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .tensor import DTYPE, NonFiniteError, Tensor


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:4], "little")


class Rng:
    """Seeded PCG64 stream that can derive independent children by label.

    ``Rng(7).child("G")`` always yields the same stream, independent of how
    many draws were taken from the parent.
    """

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must be a non-negative 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (_label_key(str(label)),))

    def __getattr__(self, name):
        # Delegate draws (normal, uniform, integers, permutation, ...).
        return getattr(self.generator, name)


def fans(shape: Sequence[int]) -> tuple:
    """(fan_in, fan_out); conv weights [K, C, kh, kw] give (C*kh*kw, K*kh*kw)."""
    shape = tuple(shape)
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[1], shape[0]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def glorot_init(shape: Sequence[int], rng: Rng, name: Optional[str] = None) -> Tensor:
    """Glorot-uniform draws: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=tuple(shape)).astype(DTYPE)
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class AdamState:
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int = 0
    # Stored as float32 so checkpoints hold them exactly.
    beta1: float = float(DTYPE(0.9))
    beta2: float = float(DTYPE(0.999))
    epsilon: float = float(DTYPE(1e-8))

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **hyper)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient (``None``) is treated as zero.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.first_moment[i] = (b1 * state.first_moment[i] + (1.0 - b1) * g).astype(DTYPE)
        v = state.second_moment[i] = (b2 * state.second_moment[i] + (1.0 - b2) * (g * g)).astype(DTYPE)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(DTYPE)
    return state


@dataclass
class Adam:
    """Adam over a fixed, ordered parameter list (one instance per network)."""

    params: List[Tensor]
    state: AdamState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)
