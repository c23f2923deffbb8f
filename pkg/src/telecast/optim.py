"""Adam with decoupled weight decay, the milestone LR schedule, and
truncated-normal init."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tensor import Tensor


class GradientNanError(RuntimeError):
    """A gradient buffer contained NaN; the update was aborted."""


@dataclass
class SchedulerConfig:
    base_lr: float = 2e-5
    gamma: float = 0.5
    milestone_period: int = 15
    total_epochs: int = 30

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.milestone_period < 1:
            raise ValueError(f"milestone_period must be >= 1, got {self.milestone_period}")


def lr_at(epoch: int, cfg: SchedulerConfig) -> float:
    """base_lr decayed by gamma once per completed milestone period."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return cfg.base_lr * cfg.gamma ** (epoch // cfg.milestone_period)


def truncated_normal(shape, rng: RngStream, mean: float = 0.0, std: float = 0.02,
                     bound_sigmas: float = 2.0) -> np.ndarray:
    """Rejection-sampled normal draws, all within mean +/- bound_sigmas * std."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    out = np.asarray(rng.normal(shape, mean, std))
    lo, hi = mean - bound_sigmas * std, mean + bound_sigmas * std
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(int(bad.sum()), mean, std)
        bad = (out < lo) | (out > hi)
    return out


@dataclass
class AdamState:
    """Moment buffers for one parameter."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class Adam:
    """Adam over named parameters; weight decay is decoupled (applied to the
    parameter before the moment update, never mixed into the gradient).
    lr_scales maps parameter-name prefixes to learning-rate multipliers."""

    params: list  # [(name, Tensor)]
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_scales: dict = field(default_factory=dict)
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params:
            self.slots[name] = AdamState(m=np.zeros_like(p.data), v=np.zeros_like(p.data))

    def _lr_for(self, name: str) -> float:
        for prefix, scale in self.lr_scales.items():
            if name.startswith(prefix):
                return self.lr * scale
        return self.lr

    def step(self) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if np.isnan(g).any():
                raise GradientNanError(f"NaN gradient in parameter {name!r}")
            state = self.slots[name]
            state.step += 1
            lr = self._lr_for(name)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            state.m = self.beta1 * state.m + (1.0 - self.beta1) * g
            state.v = self.beta2 * state.v + (1.0 - self.beta2) * (g * g)
            m_hat = state.m / (1.0 - self.beta1 ** state.step)
            v_hat = state.v / (1.0 - self.beta2 ** state.step)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def updated_names(self) -> set:
        return set(self.slots)


def adam_step(state: AdamState, param: Tensor, grad: np.ndarray, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Single-parameter functional form of the update above."""
    if np.isnan(grad).any():
        raise GradientNanError("NaN gradient passed to adam_step")
    state.step += 1
    if weight_decay:
        param.data *= 1.0 - lr * weight_decay
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * (grad * grad)
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
