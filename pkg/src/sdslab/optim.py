"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergence


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64))


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: AdamState, cfg: AdamConfig) -> np.ndarray:
    """One AdamW update; returns new params and advances ``state`` in place.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} vs grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergence("non-finite gradient in optimizer step", step=state.step)
    state.step += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grads
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grads * grads
    m_hat = state.m / (1.0 - cfg.beta1**state.step)
    v_hat = state.v / (1.0 - cfg.beta2**state.step)
    return params - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * params)


@dataclass
class Adam:
    """Stateful wrapper used by the training loops."""

    cfg: AdamConfig = field(default_factory=AdamConfig)
    state: AdamState | None = None

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        return optimizer_step(params, grads, self.state, self.cfg)
