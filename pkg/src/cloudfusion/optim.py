"""Adam with bias correction and the linear learning-rate decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class TrainSchedule:
    n_iter: int = 50
    n_decay: int = 25

    def __post_init__(self):
        if self.n_iter < 1 or self.n_decay < 1:
            raise ValueError(f"n_iter and n_decay must be positive, got {self.n_iter}, {self.n_decay}")

    @property
    def epochs(self) -> int:
        return self.n_iter + self.n_decay


def lr_multiplier(n_current: int, sched: TrainSchedule) -> float:
    """1 for the first ``n_iter`` epochs, then linear decay towards 0."""
    return max(0.0, 1.0 - max(0, 1 + n_current - sched.n_iter) / (sched.n_decay + 1))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: Tensor, state: AdamState, cfg: OptimizerConfig, t: int, lr: float | None = None,
              name: str = "<param>") -> Tensor:
    grad = param.grad
    if grad is None:
        return param
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    state.t = t
    m_hat = state.m / (1 - b1 ** t)
    v_hat = state.v / (1 - b2 ** t)
    param.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(param.dtype)
    return param


@dataclass
class Adam:
    named_params: list[tuple[str, Tensor]]
    cfg: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr: float | None = None
    t: int = 0

    def __post_init__(self):
        if self.lr is None:
            self.lr = self.cfg.learning_rate
        self.state = {name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for name, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.named_params:
            adam_step(p, self.state[name], self.cfg, self.t, lr=self.lr, name=name)
