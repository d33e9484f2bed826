"""Dense tensor value type and the reverse-mode engine.

Every differentiable operation produces a new :class:`Tensor` that remembers its
parents and a vector-Jacobian rule.  :func:`backward` walks that record in
reverse topological order.  A recorded graph can be consumed exactly once.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

VjpRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    """n-dimensional real array that can take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values. Integers and lists are converted to float64; float32 input is kept.
    requires_grad : bool
        Mark the tensor as a leaf whose gradient is wanted.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: VjpRule | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._parents else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
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

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

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

    def tanh(self):
        from . import ops
        return ops.tanh(self)

    def sigmoid(self):
        from . import ops
        return ops.sigmoid(self)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)

    def sqrt(self):
        from . import ops
        return ops.sqrt(self)

    def abs(self):
        from . import ops
        return ops.abs(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(data: np.ndarray, parents: Sequence[Tensor], vjp: VjpRule, op: str) -> Tensor:
    """Wrap a forward result; records the node only when some parent needs a gradient.

    ``vjp`` receives the upstream gradient and returns one gradient (or ``None``)
    per parent, each already reduced to that parent's shape.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of a scalar ``loss`` into every requires_grad leaf.

    Returns a mapping from leaf tensor to gradient array (same shape as the
    leaf).  Leaves listed in ``wrt`` that the loss does not depend on get
    zero-filled gradients.  Each recorded graph may be differentiated once.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward: graph already consumed; run a new forward pass")
    grads: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_toposort(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                grads[node] = grads[node] + g if node in grads else g
                continue
            if node._vjp is None:
                raise GraphConsumedError(f"backward: node '{node._op}' was already differentiated")
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
            node._vjp = None
            node._consumed = True
        loss._consumed = True
    if wrt is not None:
        for leaf in wrt:
            if leaf not in grads:
                grads[leaf] = np.zeros_like(leaf.data)
    for leaf, g in grads.items():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return grads


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def custom_op(data, parents: Sequence[Tensor], vjp: VjpRule, name: str = "custom") -> Tensor:
    """Public hook for one-off differentiable operations (used for fault injection in tests)."""
    return make_node(np.asarray(data, dtype=DEFAULT_DTYPE), [as_tensor(p) for p in parents], vjp, name)
