"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding its parents
and a backward closure. ``Tensor.backward`` collects the nodes reachable from
the loss and replays them in reverse recording order, which is a valid
topological order because a node can only be recorded after its inputs exist.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("seq", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = tuple(parents)
        # backward_fn(grad_out) -> tuple of parent grads (None where not needed)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if self.node is None and not self.requires_grad:
            raise UsageError("loss is not on the tape (no input requires grad)")
        tape = collect_tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        owners: dict[int, Tensor] = {id(self): self}
        for node, out in tape:
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = p
        # whatever is left belongs to leaves
        for key, g in grads.items():
            t = owners[key]
            if t.node is None and t.requires_grad:
                g = g.astype(t.dtype, copy=False)
                t.grad = g if t.grad is None else t.grad + g

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _raise_item(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def collect_tape(root: Tensor) -> list[tuple[Node, Tensor]]:
    """Nodes reachable from ``root`` in reverse recording order."""
    seen: set[int] = set()
    found: list[tuple[Node, Tensor]] = []
    stack = [root]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or id(n) in seen:
            continue
        seen.add(id(n))
        found.append((n, t))
        stack.extend(n.parents)
    found.sort(key=lambda item: item[0].seq, reverse=True)
    return found


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def make_result(data: np.ndarray, op: str, parents: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values produced at {where}")
    return t


def parameter(data, dtype=DEFAULT_DTYPE, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def ensure_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects N,C,H,W input, got shape {x.shape}")
