"""AdamW and SGD update rules with optional binary masks, plus the cosine schedule.

Masked updates touch only entries where the mask is 1: parameter values,
first and second moments, and decoupled weight decay all stay untouched
elsewhere, so a masked run is indistinguishable from training the selected
scalars as a standalone parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["AdamWConfig", "AdamWState", "AdamW", "SGD", "cosine_lr"]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 to 0 at the final step index."""
    if total_steps <= 1:
        return base_lr if step <= 0 else 0.0
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def _index(mask):
    if mask is None:
        return slice(None)
    return np.asarray(mask) != 0


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


class AdamWState:
    """Per-tensor moments; update() applies one masked AdamW step in place."""

    def __init__(self, shape, cfg: AdamWConfig):
        self.cfg = cfg
        self.m = np.zeros(shape, dtype=np.float32)
        self.v = np.zeros(shape, dtype=np.float32)
        self.t = 0

    def update(self, w: np.ndarray, g: np.ndarray, mask=None, lr=None) -> None:
        if w.shape != g.shape or w.shape != self.m.shape:
            raise ValueError(f"update shapes disagree: w {w.shape}, g {g.shape}, state {self.m.shape}")
        if mask is not None and np.asarray(mask).shape != w.shape:
            raise ValueError(f"mask shape {np.asarray(mask).shape} does not match parameter {w.shape}")
        cfg = self.cfg
        self.t += 1
        step_lr = cfg.lr if lr is None else lr
        idx = _index(mask)
        gm = g[idx]
        self.m[idx] = cfg.beta1 * self.m[idx] + (1.0 - cfg.beta1) * gm
        self.v[idx] = cfg.beta2 * self.v[idx] + (1.0 - cfg.beta2) * (gm * gm)
        mhat = self.m[idx] / (1.0 - cfg.beta1**self.t)
        vhat = self.v[idx] / (1.0 - cfg.beta2**self.t)
        w[idx] = w[idx] - step_lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[idx])


class SGD:
    """Plain gradient descent, mask-aware, mostly for small worked tests."""

    def __init__(self, lr: float):
        self.lr = lr

    def update(self, w: np.ndarray, g: np.ndarray, mask=None, lr=None) -> None:
        if w.shape != g.shape:
            raise ValueError(f"update shapes disagree: w {w.shape}, g {g.shape}")
        if mask is not None and np.asarray(mask).shape != w.shape:
            raise ValueError(f"mask shape {np.asarray(mask).shape} does not match parameter {w.shape}")
        step_lr = self.lr if lr is None else lr
        idx = _index(mask)
        w[idx] = w[idx] - np.float32(step_lr) * g[idx]


class AdamW:
    """AdamW over a set of (tensor, mask) slots sharing one hyperparameter set."""

    def __init__(self, cfg: AdamWConfig):
        self.cfg = cfg
        self.slots = []  # (tensor, mask or None, AdamWState)

    def add_param(self, tensor, mask=None) -> None:
        if mask is not None and np.asarray(mask).shape != tensor.data.shape:
            raise ValueError(
                f"mask shape {np.asarray(mask).shape} does not match parameter {tensor.data.shape}"
            )
        self.slots.append((tensor, mask, AdamWState(tensor.data.shape, self.cfg)))

    def step(self, snapshot, lr=None) -> None:
        for tensor, mask, state in self.slots:
            state.update(tensor.data, snapshot.wrt(tensor), mask=mask, lr=lr)
