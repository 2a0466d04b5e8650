"""Parameter initialization helpers. All draws go through one Generator so a
fixed seed pins every weight bitwise."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float, dtype) -> Tensor:
    # resample anything beyond 2 std, the usual truncation
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return Tensor(out.astype(dtype), requires_grad=True)


def zeros(shape: tuple, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape: tuple, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def full(shape: tuple, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)
