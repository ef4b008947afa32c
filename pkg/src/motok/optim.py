"""AdamW with global-norm gradient clipping and the step-drop lr schedule."""

from __future__ import annotations

import numpy as np

from .errors import TrainingError
from .params import ParamStore


class AdamW:
    def __init__(self, store: ParamStore, lr: float = 2e-4, betas=(0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip: float | None = 0.01):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0

    def global_grad_norm(self) -> float:
        total = 0.0
        for name, p in self.store.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter '{name}'")
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self):
        """Clip by global norm, apply the update, then zero all gradients."""
        norm = self.global_grad_norm()
        scale = 1.0
        if self.clip is not None and norm > self.clip and norm > 0.0:
            scale = self.clip / norm
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if scale != 1.0:
                g = g * scale
            if name not in self.store.moments:
                self.store.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = self.store.moments[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - np.float32(self.lr) * update.astype(p.data.dtype)
            p.grad = None


def lr_at_epoch(base_lr: float, epoch: int, total_epochs: int, drop_factor: float = 0.1) -> float:
    """Step schedule: drop by ``drop_factor`` from epoch floor(0.9 * total) on.

    Epochs are 1-based; with 200 epochs the drop lands on the 180th.
    """
    drop_epoch = int(np.floor(0.9 * total_epochs))
    if drop_epoch >= 1 and epoch >= drop_epoch:
        return base_lr * drop_factor
    return base_lr
