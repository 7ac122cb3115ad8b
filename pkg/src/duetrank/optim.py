"""Adam optimizer, global-norm gradient clipping and the warmup /
linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

__all__ = ["AdamState", "adam_step", "clip_global_norm", "ScheduleConfig", "lr_at"]

Params = Dict[str, np.ndarray]


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            step=0,
        )


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters absent from ``grads`` (or with a None entry) are treated
    as having zero gradient: their moments decay but at step 1 they stay
    exactly zero, so untouched parameters do not move.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.shape}"
            )
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_global_norm(grads: Params, threshold: float = 10.0) -> Params:
    """Scale all gradients by threshold/norm if the global L2 norm exceeds it."""
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: (g * scale if g is not None else None) for k, g in grads.items()}


@dataclass(frozen=True)
class ScheduleConfig:
    """Warmup to peak_lr over warmup_steps, then linear decay to 0 at total_steps."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    remaining = cfg.total_steps - step
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.peak_lr
    return cfg.peak_lr * remaining / span
