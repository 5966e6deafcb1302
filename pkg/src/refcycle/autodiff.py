"""Minimal reverse-mode automatic differentiation over numpy arrays.

Loss expressions are built as small graphs of Var nodes; backward() fills
in .grad on every node reachable from the loss. The op set is intentionally
tiny: exactly what the policy losses need (affine layers, tanh, log-softmax,
gather, exp, clip, minimum, masked means) plus a few conveniences for tests.

Everything is float64. Gradient accumulation order is fixed by graph
construction order, so results are deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum out axes that broadcasting introduced, back to the given shape."""
    if grad.shape == shape:
        return grad
    # added leading axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # axes broadcast from size 1
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the computation graph: an array plus how to push gradients
    back to its parents."""

    __slots__ = ("data", "grad", "_parents", "_vjps", "owner")

    def __init__(
        self,
        data,
        parents: tuple["Var", ...] = (),
        vjps: tuple[Callable[[Array], Array], ...] = (),
        owner: Optional[object] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[Array] = None
        self._parents = parents
        self._vjps = vjps
        self.owner = owner

    # -- helpers -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    @staticmethod
    def _wrap(x) -> "Var":
        return x if isinstance(x, Var) else Var(x)

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other) -> "Var":
        other = Var._wrap(other)
        out = Var(
            self.data + other.data,
            parents=(self, other),
            vjps=(
                lambda g: _unbroadcast(g, self.data.shape),
                lambda g: _unbroadcast(g, other.data.shape),
            ),
        )
        return out

    __radd__ = __add__

    def __neg__(self) -> "Var":
        return Var(-self.data, parents=(self,), vjps=(lambda g: -g,))

    def __sub__(self, other) -> "Var":
        return self + (-Var._wrap(other))

    def __rsub__(self, other) -> "Var":
        return Var._wrap(other) + (-self)

    def __mul__(self, other) -> "Var":
        other = Var._wrap(other)
        out = Var(
            self.data * other.data,
            parents=(self, other),
            vjps=(
                lambda g: _unbroadcast(g * other.data, self.data.shape),
                lambda g: _unbroadcast(g * self.data, other.data.shape),
            ),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Var":
        if isinstance(other, Var):
            raise TypeError("divide by a constant; Var/Var is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other) -> "Var":
        other = Var._wrap(other)
        out = Var(
            self.data @ other.data,
            parents=(self, other),
            vjps=(
                lambda g: g @ other.data.T,
                lambda g: self.data.T @ g,
            ),
        )
        return out

    def __getitem__(self, idx) -> "Var":
        def vjp(g: Array) -> Array:
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return full

        return Var(self.data[idx], parents=(self,), vjps=(vjp,))

    def reshape(self, *shape) -> "Var":
        return Var(
            self.data.reshape(*shape),
            parents=(self,),
            vjps=(lambda g: g.reshape(self.data.shape),),
        )

    # -- nonlinearities and reductions ----------------------------------

    def tanh(self) -> "Var":
        y = np.tanh(self.data)
        return Var(y, parents=(self,), vjps=(lambda g: g * (1.0 - y * y),))

    def exp(self) -> "Var":
        y = np.exp(self.data)
        return Var(y, parents=(self,), vjps=(lambda g: g * y,))

    def log(self) -> "Var":
        return Var(
            np.log(self.data), parents=(self,), vjps=(lambda g: g / self.data,)
        )

    def sum(self) -> "Var":
        return Var(
            self.data.sum(),
            parents=(self,),
            vjps=(lambda g: np.broadcast_to(g, self.data.shape).copy(),),
        )

    def mean(self) -> "Var":
        n = self.data.size
        return self.sum() / n

    def log_softmax(self) -> "Var":
        """Row-wise log-softmax along the last axis, numerically stable."""
        m = self.data.max(axis=-1, keepdims=True)
        shifted = self.data - m
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
        out_data = self.data - lse
        softmax = np.exp(out_data)

        def vjp(g: Array) -> Array:
            return g - softmax * g.sum(axis=-1, keepdims=True)

        return Var(out_data, parents=(self,), vjps=(vjp,))

    def gather(self, indices: Array) -> "Var":
        """Pick out[i] = self[i, indices[i]] for a 2-d array."""
        idx = np.asarray(indices, dtype=np.int64)
        rows = np.arange(self.data.shape[0])

        def vjp(g: Array) -> Array:
            full = np.zeros_like(self.data)
            np.add.at(full, (rows, idx), g)
            return full

        return Var(self.data[rows, idx], parents=(self,), vjps=(vjp,))

    def clip(self, lo: float, hi: float) -> "Var":
        inside = (self.data >= lo) & (self.data <= hi)
        return Var(
            np.clip(self.data, lo, hi),
            parents=(self,),
            vjps=(lambda g: g * inside,),
        )


def minimum(a: Var, b: Var) -> Var:
    """Elementwise minimum; on ties the gradient routes to the first arg."""
    a, b = Var._wrap(a), Var._wrap(b)
    take_a = a.data <= b.data
    return Var(
        np.minimum(a.data, b.data),
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * take_a, a.data.shape),
            lambda g: _unbroadcast(g * ~take_a, b.data.shape),
        ),
    )


def concat(parts: Iterable[Var]) -> Var:
    """Concatenate 1-d Vars into one vector."""
    parts = list(parts)
    sizes = [p.data.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    vjps = []
    for k, p in enumerate(parts):
        lo, hi = offsets[k], offsets[k + 1]
        vjps.append(lambda g, lo=lo, hi=hi, shape=p.data.shape: g[lo:hi].reshape(shape))

    return Var(
        np.concatenate([p.data.ravel() for p in parts]),
        parents=tuple(parts),
        vjps=tuple(vjps),
    )


def backward(loss: Var) -> None:
    """Reverse-mode sweep from a scalar loss; fills .grad on every node."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss: {loss.data}")

    # iterative topological order (graphs can be a few thousand nodes deep)
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contrib.copy()
            else:
                parent.grad = parent.grad + contrib


def grad_of(loss: Var, leaf: Var) -> Array:
    """Run backward and return the gradient at one leaf (zeros if the leaf
    does not participate in the loss)."""
    backward(loss)
    if leaf.grad is None:
        return np.zeros_like(leaf.data)
    return leaf.grad
