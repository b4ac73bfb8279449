"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float32 or float64 ndarray. Operations on tracked
tensors record a computation graph; calling :func:`backward` on a scalar loss
derives the execution-ordered :class:`GradTape` for that loss and walks it
once in reverse, accumulating gradients into every ``requires_grad`` tensor's
``grad`` buffer.

Accumulation semantics: gradients add up across backward calls on *different*
graphs sharing the same leaves (call :func:`zero_grad` between optimization
steps). Running backward twice through the *same* graph is an error; the
graph is consumed by the first pass.

Every forward result is checked for NaN/Inf by default: finite inputs must
produce finite outputs, anything else raises :class:`NonFiniteError`. The
check costs one extra pass over the output and can be suspended with
``finite_checks(False)`` if profiling demands it.

All operations are pure in their inputs: input arrays are never mutated, and
identical inputs (plus identical rng state, for :func:`dropout`) produce bit
identical outputs.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .rng import Rng

__all__ = [
    "AutodiffError", "ShapeError", "NonFiniteError",
    "Tensor", "GradTape", "backward", "zero_grad", "no_grad", "finite_checks",
    "relu", "leaky_relu", "sigmoid", "tanh", "softmax_rows", "dropout",
]

_SUPPORTED_DTYPES = (np.float32, np.float64)


class AutodiffError(RuntimeError):
    """Base class for autodiff contract violations."""


class ShapeError(AutodiffError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(AutodiffError):
    """A forward operation produced NaN or Inf from finite inputs."""


_grad_enabled = True
_finite_checks = True


class no_grad:
    """Context manager that suspends graph recording (eval-mode forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class finite_checks:
    """Context manager toggling the NaN/Inf output checks."""

    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        global _finite_checks
        self._prev = _finite_checks
        _finite_checks = self._enabled
        return self

    def __exit__(self, *exc):
        global _finite_checks
        _finite_checks = self._prev
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _as_data(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense n-dimensional value with optional gradient-tape participation.

    ``data`` is float32 or float64, row-major. ``grad`` is allocated lazily on
    first accumulation and always matches ``data``'s shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_data(data, dtype)
        if self.data.dtype not in _SUPPORTED_DTYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}; use float32 or float64")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op: str = "leaf"
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._record = False

    # -- introspection -----------------------------------------------------

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op!r}{flag})"

    def detach(self) -> "Tensor":
        """Same values, cut from the graph. Shares the underlying array."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise TypeError(
                    f"mixed dtypes {self.data.dtype}/{other.data.dtype}; cast explicitly")
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = _node(self.data + other.data, (self, other), "add")
        if out._record:
            a_shape, b_shape = self.shape, other.shape
            out._backward = lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,), "neg")
        if out._record:
            out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        out = _node(self.data - other.data, (self, other), "sub")
        if out._record:
            a_shape, b_shape = self.shape, other.shape
            out._backward = lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape))
        return out

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = _node(self.data * other.data, (self, other), "mul")
        if out._record:
            a, b = self, other
            out._backward = lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )
        return out

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return self * (1.0 / float(scalar))

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul requires tensors with ndim >= 2")
        out = _node(np.matmul(self.data, other.data), (self, other), "matmul")
        if out._record:
            a, b = self, other
            def bwd(g):
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
            out._backward = bwd
        return out

    # -- shape manipulation --------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = _node(self.data.reshape(shape), (self,), "reshape")
        if out._record:
            out._backward = lambda g: (g.reshape(old),)
        return out

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        out = _node(self.data.transpose(axes), (self,), "transpose")
        if out._record:
            out._backward = lambda g: (g.transpose(inverse),)
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out._record:
            shape, dtype = self.shape, self.data.dtype
            out._backward = lambda g: (_spread(g, shape, axis, keepdims, dtype),)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.mean(axis=axis, keepdims=keepdims), (self,), "mean")
        if out._record:
            shape, dtype = self.shape, self.data.dtype
            count = self.size if axis is None else math.prod(
                shape[a] for a in _norm_axes(axis, len(shape)))
            out._backward = lambda g: (
                _spread(g, shape, axis, keepdims, dtype) / dtype.type(count),)
        return out

    # -- elementwise ------------------------------------------------------------

    def log(self) -> "Tensor":
        out = _node(np.log(self.data), (self,), "log")
        if out._record:
            x = self.data
            out._backward = lambda g: (g / x,)
        return out

    def exp(self) -> "Tensor":
        out = _node(np.exp(self.data), (self,), "exp")
        if out._record:
            y = out.data
            out._backward = lambda g: (g * y,)
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp to [lo, hi]; gradient is passed through strictly inside."""
        out = _node(np.clip(self.data, lo, hi), (self,), "clip")
        if out._record:
            inside = ((self.data > lo) & (self.data < hi)).astype(self.data.dtype)
            out._backward = lambda g: (g * inside,)
        return out


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    """Wrap an op result; the caller attaches ``_backward`` iff ``_record``."""
    _check_finite(data, op)
    t = Tensor(data)
    t.op = op
    record = _grad_enabled and any(p.requires_grad for p in parents)
    if record:
        t.requires_grad = True
        t._parents = parents
    # Recording decision for the caller, which attaches _backward iff set.
    t._record = record
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    if grad.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")
    return grad


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(grad: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool,
            dtype: np.dtype) -> np.ndarray:
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    if axis is None:
        return np.full(shape, grad, dtype=dtype)
    if not keepdims:
        kept = list(shape)
        for a in _norm_axes(axis, len(shape)):
            kept[a] = 1
        grad = grad.reshape(kept)
    return np.broadcast_to(grad, shape).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,), "relu")
    if out._record:
        positive = (x.data > 0).astype(x.data.dtype)
        out._backward = lambda g: (g * positive,)
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = x.data.dtype.type(slope)
    out = _node(np.where(x.data > 0, x.data, x.data * s), (x,), "leaky_relu")
    if out._record:
        factor = np.where(x.data > 0, x.data.dtype.type(1.0), s)
        out._backward = lambda g: (g * factor,)
    return out


def _sigmoid(data: np.ndarray) -> np.ndarray:
    # Piecewise form avoids exp overflow on large magnitudes.
    out = np.empty_like(data)
    pos = data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    e = np.exp(data[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic. Output lies in (0,1); extreme inputs can
    saturate to the nearest representable float."""
    out = _node(_sigmoid(x.data), (x,), "sigmoid")
    if out._record:
        y = out.data
        out._backward = lambda g: (g * y * (1.0 - y),)
    return out


def tanh(x: Tensor) -> Tensor:
    out = _node(np.tanh(x.data), (x,), "tanh")
    if out._record:
        y = out.data
        out._backward = lambda g: (g * (1.0 - y * y),)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, stabilized by per-row max subtraction.

    Each trailing-axis slice of the output sums to 1; the result is invariant
    to adding a constant to any row.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y_data = e / e.sum(axis=-1, keepdims=True)
    out = _node(y_data, (x,), "softmax_rows")
    if out._record:
        y = out.data
        out._backward = lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return out


def dropout(x: Tensor, p: float, rng: Optional[Rng] = None,
            training: bool = True) -> tuple[Tensor, np.ndarray]:
    """Inverted dropout: ``x * mask / (1 - p)`` with i.i.d. Bernoulli(1-p) mask.

    In evaluation mode (``training=False``) or with ``p == 0`` the operation
    is the identity and the rng is not consumed. Drawing the mask advances
    ``rng``; pass a freshly derived stream for reproducible call sites.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, np.ones(x.shape, dtype=x.data.dtype)
    if rng is None:
        raise ValueError("dropout in training mode with p > 0 requires an rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / keep)
    out = _node(x.data * mask * scale, (x,), "dropout")
    if out._record:
        out._backward = lambda g: (g * mask * scale,)
    return out, mask


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class GradTape:
    """Execution-ordered record of the operations feeding one output.

    ``nodes`` lists interior graph nodes in topological order: every node's
    inputs appear before the node itself. The reverse walk in
    :func:`backward` therefore visits each recorded operation exactly once.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        return cls(order)

    def verify_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for parent in node._parents:
                if id(parent) in position and position[id(parent)] >= i:
                    return False
        return True

    def __len__(self) -> int:
        return len(self.nodes)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> GradTape:
    """Populate ``grad`` on every tracked tensor the scalar ``loss`` depends on.

    Consumes the graph: a second backward through the same graph raises.
    Leaf gradients accumulate across calls on separate graphs.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tracked tensor (tape absent)")
    if loss._backward is None and loss._parents == ():
        # requires_grad leaf used directly as loss
        _accumulate(loss, np.ones_like(loss.data))
        return GradTape([])
    if loss._backward is None:
        raise AutodiffError("backward already ran on this graph")
    tape = GradTape.from_root(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node.grad is None:
            raise AutodiffError(f"node {node.op!r} reached with no accumulated gradient")
        grads = node._backward(node.grad)
        node._backward = None
        if len(grads) != len(node._parents):
            raise AutodiffError(f"op {node.op!r} returned {len(grads)} gradients "
                                f"for {len(node._parents)} inputs")
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                _accumulate(parent, g)
        if node is not loss:
            node.grad = None
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
