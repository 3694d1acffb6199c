"""Float32 tensors with reverse-mode automatic differentiation."""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True
_dtype = DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def get_dtype():
    """Floating type used for new tensors (float32 unless inside :func:`precision`)."""
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build tensors in another float type.

    Used by the finite-difference oracle, which evaluates the same code in
    float64 so its rounding noise stays well below the checked tolerance.
    """
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    """A rank <= 4 float32 array that can record the ops applied to it.

    ``grad`` is None until a backward pass reaches the tensor; afterwards
    gradients accumulate across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")
    __array_ufunc__ = None  # make `ndarray op Tensor` defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors have rank <= 4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; implementations live in lcanet.ops
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
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A named trainable tensor with its SGD momentum buffer.

    ``initializer(rng, shape)`` produces the starting values; see
    :meth:`lcanet.nn.Module.reset_parameters`.
    """

    __slots__ = ("name", "momentum_buffer", "initializer")

    def __init__(self, shape: Sequence[int], initializer=None, name: str = ""):
        super().__init__(np.zeros(tuple(shape), dtype=DTYPE), requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros(self.data.shape, dtype=DTYPE)
        self.initializer = initializer

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output; ``backward_fn(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if pg.shape != parent.data.shape:
                raise RuntimeError(
                    f"gradient shape {pg.shape} does not match tensor shape {parent.data.shape}"
                )
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg
