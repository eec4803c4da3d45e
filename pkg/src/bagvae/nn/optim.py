"""Optimizers: Adam with decoupled weight decay and global-norm clipping, Adagrad."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_by_global_norm(grads: list[np.ndarray], clip_norm: float | None) -> tuple[list[np.ndarray], float]:
    """Scale every gradient by ``clip_norm / norm`` when the joint norm exceeds it."""
    norm = global_norm(grads)
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray] | None = None) -> float:
    """Apply one Adam update in place and return the pre-clip global gradient norm.

    ``grads`` defaults to each parameter's ``.grad`` (missing grads count as zero).
    """
    names = list(params)
    if grads is None:
        grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)
                 for n in names}
    for n in names:
        if grads[n].shape != params[n].shape:
            raise ValueError(f"gradient shape {grads[n].shape} does not match parameter {n} {params[n].shape}")
    clipped, norm = clip_by_global_norm([grads[n] for n in names], state.clip_norm)
    state.t += 1
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for n, g in zip(names, clipped):
        p = params[n]
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return norm


@dataclass
class AdagradState:
    learning_rate: float = 0.1
    eps: float = 1e-10
    t: int = 0
    sum_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adagrad_step(state: AdagradState, params: dict[str, Tensor]) -> None:
    state.t += 1
    for n, p in params.items():
        if p.grad is None:
            continue
        acc = state.sum_sq.setdefault(n, np.zeros_like(p.data))
        acc += p.grad * p.grad
        p.data -= state.learning_rate * p.grad / (np.sqrt(acc) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
