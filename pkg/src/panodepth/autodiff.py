"""Reverse-mode automatic differentiation on flat numpy storage.

A `Tensor` wraps a dense float array plus an optional gradient slot. Primitive
operations (see `ops.py`) record themselves onto the active `Tape` in creation
order, which is automatically a topological order. `backward` replays the tape
once in reverse, accumulating gradients additively into every leaf that
requires them. Intermediate gradients live only for the duration of one
backward call, so calling `backward` twice without resetting doubles each leaf
gradient exactly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError

DEFAULT_DTYPE = np.float64


class Tensor:
    """Dense n-dimensional float array with an optional gradient slot.

    data is stored row-major (C order). float64 is the default and is required
    for gradient checking; float32 is supported for compact checkpoints.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded primitive application: inputs, output, backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Nodes are appended at creation time, so the list is topologically sorted:
    every node's inputs were produced (or existed as leaves) before it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], tuple]) -> None:
        self.nodes.append(TapeNode(tuple(inputs), output, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Fill dLoss/dLeaf into the grad slot of every requires_grad leaf.

    Leaves are tensors that require gradients but were not produced by any
    node on this tape (parameters, inputs). Their grads accumulate additively;
    gradients of intermediate tensors are discarded when the call returns.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")

    output_ids = {id(n.output) for n in tape.nodes}
    grad_map: dict[int, np.ndarray] = {id(loss): np.array(1.0, dtype=loss.data.dtype)}

    for node in reversed(tape.nodes):
        g = grad_map.pop(id(node.output), None)
        if g is None:
            continue  # not on any path to the loss
        input_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in output_ids:
                prev = grad_map.get(id(inp))
                grad_map[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.accumulate_grad(gi)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                   num_samples: Optional[int] = None, seed: int = 0) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns max over checked coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    If num_samples is given, only that many randomly chosen coordinates are
    perturbed (the analytic pass is always complete). Non-finite function
    values are reported as failure (inf), never raised.
    """
    xt = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if not np.isfinite(y.data).all():
        return float("inf")
    backward(y, tape)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    analytic = analytic.reshape(-1)

    flat = xt.data.reshape(-1)
    n = flat.size
    if num_samples is None or num_samples >= n:
        coords = np.arange(n)
    else:
        coords = np.random.default_rng(seed).choice(n, size=num_samples, replace=False)

    max_err = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(xt).item()
        flat[i] = orig - h
        fm = f(xt).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return float("inf")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > max_err:
            max_err = err
    return float(max_err)
