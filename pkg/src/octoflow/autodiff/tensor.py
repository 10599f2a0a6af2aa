"""Tensors and the recording tape.

Operations only record themselves while a :class:`Tape` is active and at least
one input requires a gradient, so inference outside a tape keeps no graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, alpha):
        from .ops import scale
        return scale(self, alpha)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; attach its backward rule when a tape is recording.

    ``backward_fn(grad)`` returns one gradient (or None) per parent.
    """
    out = Tensor(data, op=op)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _TAPES[-1].nodes.append(out)
    return out


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        self.visits = 0
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            self.visits += 1
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64).reshape(p.shape)
                p.grad = g if p.grad is None else p.grad + g
            if node is not loss:
                node.grad = None  # intermediate grads are dead after propagation
        self.nodes.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)
