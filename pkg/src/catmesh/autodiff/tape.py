"""Reverse-mode tape and the Tensor value type.

A :class:`Tensor` is a thin wrapper around a numpy array. Tensors created by
:meth:`Tape.watch` (parameters) or produced by an op whose inputs live on a
tape carry a ``node`` id; everything else is a constant and never receives a
gradient.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence]


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Node ids are assigned in creation order, so every entry's inputs precede
    it and a reverse sweep over ids is a valid topological order.
    """

    def __init__(self):
        self._parents: list[tuple | None] = []
        self._backward: list[BackwardFn | None] = []
        self._shapes: list[tuple] = []
        self.names: dict[int, str] = {}

    def __len__(self):
        return len(self._parents)

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a leaf (parameter) node."""
        node = len(self._parents)
        data = np.asarray(value)
        self._parents.append(None)
        self._backward.append(None)
        self._shapes.append(data.shape)
        if name is not None:
            self.names[node] = name
        return Tensor(data, self, node)

    def watch_all(self, params: dict) -> dict:
        return {k: self.watch(v, k) for k, v in params.items()}

    def record(self, out: np.ndarray, inputs: Sequence, backward: BackwardFn) -> Tensor:
        parents = tuple(t.node if isinstance(t, Tensor) and t.tape is self else None for t in inputs)
        if all(p is None for p in parents):
            return Tensor(out)
        node = len(self._parents)
        self._parents.append(parents)
        self._backward.append(backward)
        self._shapes.append(np.shape(out))
        return Tensor(out, self, node)

    def leaves(self) -> list[int]:
        return [i for i, p in enumerate(self._parents) if p is None]

    def backward(self, loss: Tensor) -> "Gradients":
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not a node of this tape")
        pending: dict[int, np.ndarray] = {loss.node: np.ones(self._shapes[loss.node], dtype=loss.dtype)}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in range(loss.node, -1, -1):
            g = pending.pop(node, None)
            if g is None:
                continue
            parents = self._parents[node]
            if parents is None:
                leaf_grads[node] = g
                continue
            in_grads = self._backward[node](g)
            for p, ig in zip(parents, in_grads):
                if p is None or ig is None:
                    continue
                if p in pending:
                    pending[p] = pending[p] + ig
                else:
                    pending[p] = ig
        return Gradients(self, leaf_grads)


class Gradients:
    """Leaf gradients from one backward sweep.

    Leaves that the loss does not depend on read back as zeros of the leaf's
    shape.
    """

    def __init__(self, tape: Tape, grads: dict):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.tape is not self._tape:
            raise KeyError("tensor is not a leaf of this tape")
        if self._tape._parents[t.node] is not None:
            raise KeyError("gradients are only kept for leaf tensors")
        g = self._grads.get(t.node)
        if g is None:
            return np.zeros(self._tape._shapes[t.node])
        return g

    def __contains__(self, t: Tensor) -> bool:
        return t.node in self._grads

    def by_name(self) -> dict:
        tape = self._tape
        out = {}
        for node, name in tape.names.items():
            g = self._grads.get(node)
            out[name] = g if g is not None else np.zeros(tape._shapes[node])
        return out


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    """Reverse accumulation from a scalar ``loss``."""
    tape = tape if tape is not None else loss.tape
    if tape is None:
        raise ValueError("loss is a constant; nothing to differentiate")
    return tape.backward(loss)


def common_tape(inputs: Iterable) -> Tape | None:
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None and t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
    return tape
