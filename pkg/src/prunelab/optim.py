"""AdamW with linear warmup, over the tensor module's gradient maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamWConfig:
    learning_rate: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray


class AdamW:
    """Decoupled-weight-decay Adam; lr ramps linearly over warmup then holds.

    Only parameters present in the supplied gradient map move; anything
    frozen (requires_grad False) or absent stays bit-identical.
    """

    def __init__(self, params: list[Tensor], config: AdamWConfig | None = None):
        self.config = config or AdamWConfig()
        self.params = list(params)
        self.step_count = 0
        self._slots: dict[int, _Slot] = {}

    def lr_at(self, step: int) -> float:
        base = self.config.learning_rate
        warmup = self.config.warmup_steps
        if warmup > 0 and step < warmup:
            return base * step / warmup
        return base

    def step(self, grads: dict[Tensor, np.ndarray]) -> float:
        """Apply one update from a gradient map; returns the lr used."""
        self.step_count += 1
        lr = self.lr_at(self.step_count)
        beta1, beta2 = self.config.betas
        eps = self.config.eps
        wd = self.config.weight_decay
        bias1 = 1.0 - beta1**self.step_count
        bias2 = 1.0 - beta2**self.step_count
        for param in self.params:
            if not param.requires_grad or param not in grads:
                continue
            g = grads[param]
            if g.shape != param.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {param.shape}")
            slot = self._slots.get(id(param))
            if slot is None:
                slot = _Slot(np.zeros_like(param.data), np.zeros_like(param.data))
                self._slots[id(param)] = slot
            slot.m = beta1 * slot.m + (1.0 - beta1) * g
            slot.v = beta2 * slot.v + (1.0 - beta2) * (g * g)
            m_hat = slot.m / bias1
            v_hat = slot.v / bias2
            update = m_hat / (np.sqrt(v_hat) + eps)
            if wd:
                update = update + wd * param.data
            param.data = (param.data - lr * update).astype(param.data.dtype)
        return lr
