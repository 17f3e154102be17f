from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def zeros_like(cls, param, **kw) -> "AdamState":
        shape = np.shape(param)
        return cls(np.zeros(shape), np.zeros(shape), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update. Advances ``state`` in place."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ValueError(f"adam shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    return param - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class Adam:
    """Adam over a dict of named parameters."""

    lr: float = 0.01
    states: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> dict:
        out = {}
        for name, p in params.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.zeros_like(p, lr=self.lr)
            out[name] = adam_step(p, grads[name], st)
        return out
