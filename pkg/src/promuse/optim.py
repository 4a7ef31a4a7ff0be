"""AdamW with decoupled weight decay, plus per-epoch exponential LR decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .params import ParameterSet


@dataclass
class AdamWState:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class MissingGradientError(RuntimeError):
    pass


def adamw_step(params: ParameterSet, state: AdamWState) -> None:
    """One AdamW update of every trainable entry, in place; clears grads.

    Per entry:  theta <- theta - lr*wd*theta, then the bias-corrected Adam
    step  theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    Frozen entries are never read or written.
    """
    names = params.trainable_names()
    for name in names:
        if params[name].grad is None:
            raise MissingGradientError(f"trainable parameter {name!r} has no gradient")
    state.t += 1
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in names:
        p = params[name]
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    params.clear_grad()


def exp_lr_decay(state: AdamWState, factor: float) -> AdamWState:
    """Multiply the learning rate by ``factor`` (call once per epoch)."""
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"decay factor must lie in (0, 1], got {factor}")
    state.learning_rate *= factor
    return state
