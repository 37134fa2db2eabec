"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

A ``Tensor`` wraps a row-major ndarray and remembers how it was produced;
calling ``backward()`` on a scalar walks the graph in reverse topological
order and accumulates gradients into every tensor that requires them.
``Parameter`` is a named leaf with a ``trainable`` flag: frozen parameters
never accumulate gradient, which is the contract the training stages rely
on when they freeze subsets of the model.

Only the operations the model family needs are provided; there is no
general broadcasting machinery beyond what those operations use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode grads."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjp: Callable[[np.ndarray], None] | None = _vjp
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        """Add ``g`` to this tensor's gradient. ``own=True`` promises that
        ``g`` is a fresh array no one else holds, letting us adopt it
        without a copy; aliased gradients are never mutated in place."""
        if isinstance(self, Parameter) and not self.trainable:
            return
        if self.grad is None:
            self.grad = g
            self._grad_owned = own
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``.grad``."""
        own_seed = False
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
            own_seed = True
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64), own=own_seed)
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # ---- arithmetic -----------------------------------------------------

    def __neg__(self) -> Tensor:
        return self * -1.0

    def __add__(self, other) -> Tensor:
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, _as_tensor(other) * -1.0)

    def __rsub__(self, other) -> Tensor:
        return add(_as_tensor(other), self * -1.0)

    def __mul__(self, other) -> Tensor:
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        return mul(self, _as_tensor(other) ** -1.0)

    def __rtruediv__(self, other) -> Tensor:
        return mul(_as_tensor(other), self ** -1.0)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, float(exponent))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key) -> Tensor:
        return take_slice(self, key)

    # ---- shape ----------------------------------------------------------

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)


class Parameter(Tensor):
    """Named trainable leaf. ``grad_mask`` (optional) zeroes per-element
    gradients at optimizer time, used for row-restricted embedding updates."""

    __slots__ = ("name", "_trainable", "grad_mask")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self._trainable = bool(trainable)
        self.grad_mask: np.ndarray | None = None

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self._trainable = bool(value)
        self.requires_grad = self._trainable

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A graph leaf that never receives gradient."""
    return Tensor(x, requires_grad=False)


def stop_gradient(x: Tensor) -> Tensor:
    """Detach: same values, no path back to ``x``."""
    return Tensor(x.data.copy())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- primitive operations -----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _parents=(a, b), _vjp=vjp)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data)

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast as in ``np.matmul``."""
    out_data = np.matmul(a.data, b.data)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, _parents=(a, b), _vjp=vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def take_slice(a: Tensor, key) -> Tensor:
    out_data = a.data[key]
    fancy = isinstance(key, np.ndarray) and key.dtype.kind in "iu"

    def vjp(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if fancy:
                np.add.at(full, key, g)    # repeated indices accumulate
            else:
                full[key] = g
            a._accumulate(full, own=True)

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor(out_data, _parents=tuple(tensors), _vjp=vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, _parents=(a,), _vjp=vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)
