"""Adam, cosine annealing and Kaiming initialisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DiffTensor, TensorError


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.5, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise TensorError("adam_step", "params, grads and state have different lengths")
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise TensorError("adam_step", "shape mismatch", [p.shape, g.shape, m.shape, v.shape])
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step)


@dataclass
class Adam:
    """Adam over a fixed list of DiffTensor parameters, updated in place."""

    params: list[DiffTensor]
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like([p.value for p in self.params])

    def step(self, lr: float) -> None:
        new, self.state = adam_step([p.value for p in self.params],
                                    [p.grad for p in self.params],
                                    self.state, lr, self.beta1, self.beta2, self.eps)
        for p, v in zip(self.params, new):
            p.value = v


def cosine_anneal(lr0: float, step: int, total_steps: int) -> float:
    if total_steps < 0 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def kaiming_init(shape: Sequence[int], fan_in: int, seed: int) -> DiffTensor:
    """He-normal weights: N(0, 2 / fan_in), deterministic per seed."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = np.random.default_rng(seed)
    return DiffTensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(shape)),
                      requires_grad=True)
