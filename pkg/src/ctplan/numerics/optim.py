"""Adam and exponential-moving-average parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError, TrainingDivergence
from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergence(f"non-finite gradient for parameter {name!r}",
                                     step=state.step, param=name)
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} ({name})")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self, grads) -> None:
        if not isinstance(grads, dict):
            grads = dict(zip(self.params, grads))
        adam_step(self.state, self.params, grads)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base`` at step 1 to ``floor * base`` at ``total``."""
    if total <= 1:
        return base
    frac = min(max(step - 1, 0) / (total - 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def ema_update(target: dict[str, Tensor], online: dict[str, Tensor], mu: float) -> None:
    """``target <- mu * target + (1 - mu) * online`` elementwise, in place."""
    if not 0.0 <= mu <= 1.0:
        raise ContractError(f"EMA decay must lie in [0, 1], got {mu}")
    if target.keys() != online.keys():
        raise DimensionError("target and online parameter names differ")
    for name, t in target.items():
        o = online[name].data
        if o.shape != t.shape:
            raise DimensionError(f"shape mismatch for {name}: {t.shape} vs {o.shape}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            t.data[...] = o
        else:
            t.data[...] = mu * t.data + (1.0 - mu) * o
