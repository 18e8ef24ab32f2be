from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Decay is applied first (``p -= lr * wd * p``), then the Adam delta.
    Parameters without a gradient entry are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data -= (state.lr * state.weight_decay) * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=5e-4, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, weight_decay=weight_decay,
                               beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
