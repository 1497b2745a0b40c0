"""Adam with a linear learning-rate schedule, over named tensor dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossWeights


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 1024
    lr_start: float = 1e-3
    lr_end: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 0  # 0 disables periodic validation logging

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr_start >= self.lr_end >= 0.0):
            raise ValueError("need lr_start >= lr_end >= 0")
        self.weights.validate()


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear interpolation from lr_start (step 0) to lr_end (step = total)."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return config.lr_start + (config.lr_end - config.lr_start) * (step / total_steps)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def init_adam(tensors: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(t) for k, t in tensors.items()},
        v={k: np.zeros_like(t) for k, t in tensors.items()},
        step=0,
    )


def adam_step(tensors: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on `tensors`."""
    state.step += 1
    t = state.step
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, param in tensors.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
