"""Adam with bias correction, applied over named parameters in sorted order."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg) -> None:
    """One bias-corrected Adam update, in place.

    Parameter names are visited in sorted order so the update sequence (and
    therefore bitwise reproducibility) never depends on dict insertion order.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ContractError(f"{name}: grad shape {g.shape} != param shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def collect_grads(params: dict) -> dict:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()
