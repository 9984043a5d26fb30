"""Dense tensors with reverse-mode automatic differentiation.

Every array in the model lives in a :class:`Tensor`.  Operations record a
parent list and a local backward rule on their output; :func:`backward`
walks the recorded graph once in reverse topological order and accumulates
gradients into the leaves.

Precision is global: 32-bit floats by default (training), switchable to
64-bit for gradient and oracle checks::

    with precision(64):
        x = Tensor([1.0, 2.0], requires_grad=True)
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the backward pass (non-scalar root, reuse of a freed graph)."""


def set_precision(bits: int) -> None:
    global _default_dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _default_dtype = _DTYPES[bits]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the global float precision."""
    previous = _default_dtype
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None
        self._freed = False

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent,
    each shaped like that parent's data.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._freed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return make_node(out, (x,), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity when not training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; the leading axes of ``a`` act as a batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError(f"matmul expects a[..., k] and b[k, n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_node(ad @ bd, (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_pool_time(x: Tensor) -> Tensor:
    """Average a ``[batch, L, K]`` tensor over its temporal axis."""
    if x.ndim != 3:
        raise ShapeError(f"mean_pool_time expects [batch, L, K], got {x.shape}")
    L = x.shape[1]
    if L == 0:
        raise ShapeError("mean_pool_time needs at least one time step")
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, None, :] / L, shape).astype(x.data.dtype),)

    return make_node(x.data.mean(axis=1), (x,), bw)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, K], got {logits.shape}")
    n, k = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape[0] != n:
        raise ShapeError(f"{target.shape[0]} targets for {n} logit rows")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"target class out of range [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, target].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, target] -= 1.0
        return (grad * (g / n),)

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def binary_cross_entropy_multilabel(logits: Tensor, targets) -> Tensor:
    """Mean over batch and classes of sigmoid cross-entropy, in log-sum-exp form."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("multilabel targets must be 0 or 1")
    z = logits.data
    y = targets.astype(z.dtype)
    # max(z, 0) - z*y + log(1 + exp(-|z|))
    per_entry = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    count = z.size

    def bw(g):
        return ((_sigmoid(z) - y) * (g / count),)

    return make_node(np.asarray(per_entry.mean(), dtype=z.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list:
    """The tape: every node reachable from ``root``, inputs before outputs."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphError("backward already ran on this graph; rebuild it (or zero_grad) first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    tape = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._freed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
