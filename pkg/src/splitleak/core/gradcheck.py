"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import GradTape, Tensor


def tape_gradient(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    X = Tensor(np.array(x, dtype=np.float64))
    with GradTape() as tape:
        tape.watch(X)
        y = f(X)
    return tape.gradient(y, [X])[0]


def numerical_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f(Tensor(x)).data)
        flat[i] = old - h
        down = float(f(Tensor(x)).data)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def gradient_error(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """``‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)`` (0 when both vanish)."""
    a = tape_gradient(f, x)
    b = numerical_gradient(f, x, h)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
