"""Adam optimizer: functional core plus a Tensor-facing wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Deterministic; parameters with a
    zero gradient on the first step stay unchanged."""
    state.t += 1
    t = state.t
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - hyper.beta1**t)
        v_hat = v / (1.0 - hyper.beta2**t)
        new_params[name] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_params, state


class Adam:
    """In-place Adam over named Tensors; missing gradients count as zero."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.hyper = AdamHyper(lr, beta1, beta2, eps)
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        values = {k: p.data for k, p in self.params.items()}
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }
        new_values, self.state = adam_step(values, grads, self.state, self.hyper)
        for k, p in self.params.items():
            p.data = new_values[k]
