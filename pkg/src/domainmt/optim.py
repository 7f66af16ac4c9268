"""Adam with bias correction and the warmup / inverse-sqrt learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """Update ``params`` in place. Missing grads count as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} ({bad} entries)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_schedule(step: int, warmup: int, lr_peak: float) -> float:
    """Linear warmup to ``lr_peak`` at ``warmup``, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return lr_peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Thin stateful wrapper used by the training loops."""

    def __init__(self, params, lr_peak: float = 3e-4, warmup: int = 4000,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8):
        self.params = params  # name -> Tensor
        self.lr_peak = lr_peak
        self.warmup = warmup
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        lr = lr_schedule(self.state.step + 1, self.warmup, self.lr_peak)
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            lr,
        )
        return lr
