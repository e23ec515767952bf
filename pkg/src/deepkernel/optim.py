"""Adam with the exponential per-batch learning-rate decay used for training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor

BASE_LR = 1e-4
DECAY = 0.99
DECAY_EVERY = 100


class NumericalError(FloatingPointError):
    pass


def lr_schedule(step: int, base: float = BASE_LR, decay: float = DECAY, every: float = DECAY_EVERY) -> float:
    """``base * decay ** (step / every)`` with ``step`` counted in batches."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return base * decay ** (step / every)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class Adam:
    """Bias-corrected Adam over named parameters.

    Parameters without a gradient are left untouched and their moments are
    not advanced.
    """

    params: list[tuple[str, Tensor]]
    base_lr: float = BASE_LR
    decay: float = DECAY
    decay_every: float = DECAY_EVERY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return lr_schedule(self.step_count, self.base_lr, self.decay, self.decay_every)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in parameter {name}")
        lr = self.lr
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1**t)
            vhat = self.v[name] / (1 - self.beta2**t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)
        self.step_count += 1

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
            out[f"t.{name}"] = np.asarray([self.t[name]], dtype=np.float64)
        out["step_count"] = np.asarray([self.step_count], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"][0])
        for key, arr in state.items():
            kind, _, name = key.partition(".")
            if kind == "m":
                self.m[name] = np.array(arr)
            elif kind == "v":
                self.v[name] = np.array(arr)
            elif kind == "t":
                self.t[name] = int(arr[0])
