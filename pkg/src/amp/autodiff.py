"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64 numpy under the hood. The computation graph is dynamic:
each operation records its parents and a backward closure on the output
tensor, and ``backward`` replays the graph in reverse topological order.
Broadcasting is deliberately restricted to exact shapes, scalars and size-1
axes (same rank), which keeps every gradient rule a one-liner plus an
un-broadcast reduction.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, ParameterError, ShapeError, StateError

# Incremented after every completed backward pass; CaptureHandle compares
# against it to detect reads that happen before any backward ran.
_completed_backwards = 0

_no_grad_depth = 0


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _no_grad_depth
        _no_grad_depth += 1
        return self

    def __exit__(self, *exc):
        global _no_grad_depth
        _no_grad_depth -= 1
        return False


def grad_enabled() -> bool:
    return _no_grad_depth == 0


class Tensor:
    """Dense float64 tensor with an optional gradient slot.

    Immutable after creation except for ``grad`` (and in-place parameter
    updates done by optimizers between forward passes).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and grad_enabled()
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the actual rules live in the free functions below
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Build an op output, recording the graph only when a parent needs grad."""
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return
    raise ShapeError(f"incompatible elementwise shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU with the tanh approximation (the variant finite differences test)."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * local)

    return _make(0.5 * x * (1.0 + t), (a,), backward)


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Row-stable softmax of ``a / temperature`` along ``axis``."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    a = _wrap(a)
    z = a.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * p, axis=axis, keepdims=True)
        _accum(a, p * (g - inner) / temperature)

    return _make(p, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) slicing; the backward scatters into a zero tensor."""
    a = _wrap(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx] = g
        _accum(a, full)

    return _make(np.array(a.data[idx]), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain + bias.

    Built from primitives so the gradient comes from the chain rule rather
    than a hand-derived formula.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm gain/bias must have shape ({x.shape[-1]},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = tensor_mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tensor_mean(mul(xc, xc), axis=-1, keepdims=True)
    xhat = div(xc, sqrt(add(var, Tensor(np.full(var.shape, eps)))))
    row = (1,) * (x.ndim - 1) + (x.shape[-1],)
    return add(mul(xhat, reshape(gain, row)), reshape(bias, row))


# ---------------------------------------------------------------------------
# backward pass and captures


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    seen.add(id(root))
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar root.

    Grads of reachable nodes are reset first, so repeated calls never
    accumulate across passes.
    """
    global _completed_backwards
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    _completed_backwards += 1


class CaptureHandle:
    """Read-back handle for an intermediate tensor's value and gradient."""

    def __init__(self, tensor: Tensor):
        self._tensor = tensor
        self._epoch = _completed_backwards

    @property
    def value(self) -> np.ndarray:
        return self._tensor.data

    @property
    def grad(self) -> np.ndarray:
        if _completed_backwards == self._epoch:
            raise StateError("capture gradient read before any backward pass")
        if self._tensor.grad is None:
            # captured branch did not reach the root: gradient is zero
            return np.zeros_like(self._tensor.data)
        return self._tensor.grad


def capture_intermediate(tensor: Tensor) -> CaptureHandle:
    return CaptureHandle(tensor)
