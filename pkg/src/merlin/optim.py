"""Adam and AdaGrad over flat float64 parameter arrays (updated in place)."""
from __future__ import annotations

import numpy as np

from ._accel import njit, use_numba


class OptimizerShapeError(ValueError):
    pass


@njit(cache=True)
def _adam_nb(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def _adagrad_nb(p, g, acc, lr, eps, wd):
    for i in range(p.size):
        gi = g[i] + wd * p[i]
        acc[i] += gi * gi
        p[i] -= lr * gi / (np.sqrt(acc[i]) + eps)


class Adam:
    """Adam with bias correction; weight decay enters as an L2 term on the gradient."""

    kind = "adam"

    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if params.shape != grads.shape or params.size != self.m.size:
            raise OptimizerShapeError(
                f"adam: params {params.shape}, grads {grads.shape}, state {self.m.shape}")
        self.t += 1
        b1, b2 = self.betas
        bc1, bc2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        p, g = params.reshape(-1), grads.reshape(-1)
        if use_numba():
            _adam_nb(p, g, self.m, self.v, self.lr, b1, b2, self.eps, self.weight_decay, bc1, bc2)
        else:
            g = g + self.weight_decay * p if self.weight_decay else g
            self.m *= b1
            self.m += (1.0 - b1) * g
            self.v *= b2
            self.v += (1.0 - b2) * g * g
            p -= self.lr * (self.m / bc1) / (np.sqrt(self.v / bc2) + self.eps)
        return params


class AdaGrad:
    """accumulator += g^2; param -= lr * g / (sqrt(accumulator) + eps)."""

    kind = "adagrad"

    def __init__(self, size: int, lr: float = 1e-3, eps: float = 1e-10, weight_decay: float = 0.0):
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.acc = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """``mask`` (bool, flat) restricts the update to a subset of coordinates."""
        if params.shape != grads.shape or params.size != self.acc.size:
            raise OptimizerShapeError(
                f"adagrad: params {params.shape}, grads {grads.shape}, state {self.acc.shape}")
        self.t += 1
        p, g = params.reshape(-1), grads.reshape(-1)
        if mask is not None:
            idx = np.flatnonzero(mask)
            sub_p, sub_a = p[idx], self.acc[idx]
            _adagrad_np(sub_p, g[idx], sub_a, self.lr, self.eps, self.weight_decay)
            p[idx], self.acc[idx] = sub_p, sub_a
        elif use_numba():
            _adagrad_nb(p, g, self.acc, self.lr, self.eps, self.weight_decay)
        else:
            _adagrad_np(p, g, self.acc, self.lr, self.eps, self.weight_decay)
        return params


def _adagrad_np(p, g, acc, lr, eps, wd):
    if wd:
        g = g + wd * p
    acc += g * g
    p -= lr * g / (np.sqrt(acc) + eps)
