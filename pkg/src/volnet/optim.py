"""Class-balanced binary cross-entropy and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, ShapeMismatch

CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_pos: float
    w_neg: float


def class_weights(n_pos: int, n_neg: int) -> LossWeights:
    """Weights ``N / (2 n_c)`` so each class carries half of the total loss mass."""
    if n_pos < 1 or n_neg < 1:
        raise EmptyClass(f"both classes need at least one sample, got n_pos={n_pos}, n_neg={n_neg}")
    total = n_pos + n_neg
    return LossWeights(total / (2 * n_pos), total / (2 * n_neg))


def wbce(scores, labels, w: LossWeights):
    """Weighted BCE averaged over the batch.

    Returns ``(loss, dloss_dscore)``.  Scores are clamped to
    ``[1e-7, 1 - 1e-7]`` before the log; the gradient is that of the clamped
    expression (zero where the clamp is active).
    """
    p = np.asarray(scores)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise ShapeMismatch(f"scores {p.shape} and labels {y.shape} must be equal-length vectors")
    p64 = p.astype(np.float64)
    y64 = y.astype(np.float64)
    weight = np.where(y64 == 1, w.w_pos, w.w_neg)
    pc = np.clip(p64, CLAMP, 1 - CLAMP)
    n = p.size
    loss = -float(np.sum(weight * (y64 * np.log(pc) + (1 - y64) * np.log(1 - pc)))) / n
    grad = -weight * (y64 / pc - (1 - y64) / (1 - pc)) / n
    grad = np.where((p64 < CLAMP) | (p64 > 1 - CLAMP), 0.0, grad)
    return loss, grad.astype(p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place, of the parameters named in ``grads``.

    Parameters without a gradient entry (frozen ones) are not touched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
