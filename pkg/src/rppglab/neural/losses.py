"""Pearson pulse loss, threshold-L1 appearance loss and the two phase losses."""

from __future__ import annotations

import numpy as np

from ..autodiff import DiffTensor, ops
from ..metrics import pearson_terms
from .layers import Module

DEN_GUARD = 1e-8


def _sum_last(x):
    return ops.sum_(x, axis=-1)


def loss_ppg(p, p_hat) -> DiffTensor:
    """``1 - pearson(p, p_hat)``, averaged over leading batch axes.

    ``p`` is the reference (usually a constant); ``p_hat`` carries the
    gradient.  The denominator is floored at ``1e-8`` so a constant estimate
    gives a finite loss of 1.
    """
    p = p if isinstance(p, DiffTensor) else DiffTensor(np.asarray(p, dtype=np.float64))
    p_hat = p_hat if isinstance(p_hat, DiffTensor) else DiffTensor(np.asarray(p_hat, dtype=np.float64))
    if p.shape != p_hat.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {p_hat.shape}")
    if p.shape[-1] < 2:
        raise ValueError("need at least two samples")
    num, vp, vq = pearson_terms(p, p_hat, _sum_last)
    den = ops.sqrt(ops.maximum_scalar(vp * vq, DEN_GUARD ** 2))
    r = num * ops.reciprocal(den)
    return ops.add_scalar(ops.mul_scalar(ops.mean(r), -1.0), 1.0)


def loss_appearance(i_dark, i_hat, eps: float = 0.1) -> DiffTensor:
    """Threshold L1: mean ``|diff|`` over elements whose ``|diff| >= eps``.

    The mask comes from forward values and is held constant in the backward
    pass.  An empty mask gives exactly zero.
    """
    i_dark = i_dark if isinstance(i_dark, DiffTensor) else DiffTensor(np.asarray(i_dark, dtype=np.float64))
    i_hat = i_hat if isinstance(i_hat, DiffTensor) else DiffTensor(np.asarray(i_hat, dtype=np.float64))
    if i_dark.shape != i_hat.shape:
        raise ValueError(f"shape mismatch: {i_dark.shape} vs {i_hat.shape}")
    diff = i_hat - i_dark
    mask = (np.abs(diff.value) >= eps).astype(np.float64)
    count = mask.sum()
    if count == 0:
        return DiffTensor(0.0)
    return ops.mul_scalar(ops.sum_(ops.abs_(diff) * mask), 1.0 / count)


class frozen:
    """Put ``module`` in eval mode with gradients off; restore on exit."""

    def __init__(self, module: Module):
        self.module = module

    def __enter__(self):
        self.saved = (self.module.training, [p.requires_grad for p in self.module.parameters()])
        self.module.eval().requires_grad_(False)
        return self.module

    def __exit__(self, *exc):
        mode, flags = self.saved
        self.module.train(mode)
        for p, f in zip(self.module.parameters(), flags):
            p.requires_grad = f


def generator_terms(i_light, i_dark, p, G, E, lam: float = 1.0, eps: float = 0.1):
    """Generation-phase loss and its parts: ``(total, l_ppg, l_app, i_hat)``.

    E is evaluated frozen, so only G's parameters receive gradients.
    """
    i_hat = G(i_light)
    with frozen(E):
        l_ppg = loss_ppg(p, E(i_hat))
    l_app = loss_appearance(i_dark, i_hat, eps)
    total = l_ppg + ops.mul_scalar(l_app, lam) if lam != 0 else l_ppg
    return total, l_ppg, l_app, i_hat


def loss_generator(i_light, i_dark, p, G, E, lam: float = 1.0, eps: float = 0.1) -> DiffTensor:
    return generator_terms(i_light, i_dark, p, G, E, lam, eps)[0]


def loss_estimator(i_light, i_hat, p, E) -> DiffTensor:
    """Estimation-phase loss; ``i_hat`` is detached from the generator."""
    i_hat = i_hat.detach() if isinstance(i_hat, DiffTensor) else i_hat
    return loss_ppg(p, E(i_hat)) + loss_ppg(p, E(i_light))
