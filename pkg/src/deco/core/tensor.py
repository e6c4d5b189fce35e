"""Reverse-mode autodiff tensor engine.

Storage is plain numpy (row-major, float32 by default; float64 is used for
gradient checking).  Every differentiable op records a tape node linking the
result to its inputs, and ``backward`` replays the tape exactly once in
reverse topological order, accumulating into ``.grad``.

A tensor and the tape hanging off it are single-writer: forward and backward
passes on one model instance must be serialized by the caller.
"""

from __future__ import annotations

import contextlib

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Raised when operand shapes or dims violate an op contract."""


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Toggle post-op finiteness assertions (slow, for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        # tape linkage, set by ops only
        self._parents = None
        self._bwd = None
        self._op = None

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{tag})"

    # ---- autodiff -------------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> int:
        """Backpropagate from this scalar; returns the number of tape nodes visited.

        Gradients accumulate into leaf ``.grad`` buffers, so calling twice
        without ``zero_grad`` doubles them.
        """
        return backward(self)

    def free_graph(self) -> None:
        """Drop tape linkage reachable from this tensor (breaks ref cycles)."""
        for node in _topo_order(self):
            node._parents = None
            node._bwd = None

    # ---- operator sugar (thin wrappers over deco.core.ops) --------------------

    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        return ops.add_scalar(ops.mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops

        return ops.mul_scalar(self, -1.0)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops

        return ops.sum_(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a recorded init recipe and a dotted name.

    The name is assigned when the owning module tree is walked; it is the
    checkpoint identity of the parameter.
    """

    __slots__ = ("init_spec", "name")

    def __init__(self, data, init_spec: str = "explicit", dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.init_spec = init_spec
        self.name = None


def _topo_order(root: Tensor):
    """Postorder over the grad-requiring subgraph; reversed it is backprop order."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._parents:
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return topo


def backward(loss: Tensor) -> int:
    """Populate gradients on every parameter reachable from ``loss``.

    The tape is walked once; each recorded op's backward runs exactly once.
    Returns the number of nodes visited (leaves included).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to backpropagate")

    topo = _topo_order(loss)
    # non-leaf grads are scratch space for this walk; leaves accumulate
    for node in topo:
        if node._parents is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node._bwd is None:
            continue
        gout = node.grad
        if gout is None:
            continue
        grads = node._bwd(gout)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    return len(topo)
