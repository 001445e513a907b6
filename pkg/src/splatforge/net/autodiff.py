"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor records its parents and a backward closure; calling `backward` on
one or more roots topologically sorts the recorded graph and accumulates
gradients into every reachable node's `.grad`.  Gradients use the same dtype
as the forward data (float32 in production, float64 in gradient tests).
"""

from __future__ import annotations

import numpy as np

from ..errors import StateError


class Tensor:
    """Node in the autodiff graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "name")

    def __init__(self, data: np.ndarray, parents: tuple = (),
                 backward_fn=None, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data: np.ndarray, name: str | None = None):
        super().__init__(np.asarray(data), (), None, name)


def _topo_order(roots: list[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(r, False) for r in roots]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def backward(roots: list[tuple[Tensor, np.ndarray]]) -> None:
    """Backpropagate from (tensor, output-gradient) roots through the graph.

    Gradients accumulate into `.grad` of every node reached, so repeated
    calls (e.g. per-step loss accumulation) sum their contributions.
    """
    if not roots:
        raise StateError("backward called with no roots")
    for t, g in roots:
        g = np.asarray(g, dtype=t.data.dtype)
        if g.shape != t.data.shape:
            raise StateError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
        t.accumulate(g)
    order = _topo_order([t for t, _ in roots])
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
