"""AdamW with decoupled weight decay, linear warmup/decay, early stopping.

The update is

    m <- b1*m + (1-b1)*g        v <- b2*v + (1-b2)*g^2
    m_hat = m / (1 - b1^t)      v_hat = v / (1 - b2^t)
    w <- w - lr_t * (m_hat / (sqrt(v_hat) + eps) + lambda*w)

with the decay term outside the adaptive quotient.  Biases and layer-norm
gains/shifts are excluded from the decay (see :func:`decays_by_default`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError


@dataclass
class AdamWConfig:
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.learning_rate <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and eps must be > 0, decay >= 0")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init_like(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def decays_by_default(name: str) -> bool:
    """Weight-decay mask: skip biases and layer-norm affine parameters."""
    return not name.endswith((".bias", ".gain", ".shift"))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    config: AdamWConfig,
    lr_t: float,
    decay_filter=decays_by_default,
) -> None:
    """One in-place update of every parameter that has a gradient."""
    state.t += 1
    bc1 = 1.0 - config.beta1**state.t
    bc2 = 1.0 - config.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(
                f"gradient shape {tuple(g.shape)} does not match parameter "
                f"{name} of shape {tuple(p.shape)}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        decay = config.weight_decay if decay_filter(name) else 0.0
        p -= lr_t * (m_hat / (np.sqrt(v_hat) + config.eps) + decay * p)


@dataclass
class ScheduleConfig:
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ConfigError(
                f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})"
            )


def lr_at_step(step: int, base_lr: float, schedule: ScheduleConfig) -> float:
    """Linear warmup to base_lr, then linear decay to 0 at total_steps."""
    if step < schedule.warmup_steps:
        return base_lr * step / schedule.warmup_steps
    remaining = schedule.total_steps - step
    span = schedule.total_steps - schedule.warmup_steps
    return base_lr * max(0.0, remaining / span)


CONTINUE = "continue"
STOP = "stop"


@dataclass
class EarlyStopState:
    patience: int = 3
    best: float | None = None
    best_epoch: int | None = None
    stale: int = 0
    epochs_seen: int = field(default=0)


def early_stop_update(state: EarlyStopState, epoch_metric: float) -> str:
    """Track a minimized validation metric; stop after `patience` flat epochs.

    Improvement must be strict.  The first observation always records a
    best.  Returns ``"continue"`` or ``"stop"``.
    """
    if not math.isfinite(epoch_metric):
        raise DivergenceError(
            f"early stopping received a non-finite metric: {epoch_metric}"
        )
    state.epochs_seen += 1
    if state.best is None or epoch_metric < state.best:
        state.best = epoch_metric
        state.best_epoch = state.epochs_seen
        state.stale = 0
        return CONTINUE
    state.stale += 1
    if state.stale >= state.patience:
        return STOP
    return CONTINUE
