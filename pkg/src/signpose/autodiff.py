"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation builds a graph node carrying a backward rule
(a vector-Jacobian product). ``backward`` on a scalar walks the recorded
graph once in reverse topological order.

Two implementation constraints worth knowing about:

- Forward matrix products and the softmax denominator accumulate strictly
  left-to-right along the contracted axis. Together with exact zero masking
  this makes every output row bitwise independent of trailing masked
  positions, so a causally masked forward pass over a prefix reproduces the
  full-sequence pass exactly (required for autoregressive decoding checks).
- Every op output is checked for NaN/Inf and the producing op is named in
  the error, so numeric blowups surface where they happen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "arccos_clamped",
    "tsum",
    "tmean",
    "softmax",
    "layer_norm",
    "concat",
    "reshape",
    "transpose",
    "swapaxes",
    "embedding",
    "cosine_similarity",
    "quat_dot",
    "as_tensor",
]


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 array node in a reverse-mode computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@dataclass
class Tape:
    """Topologically ordered record of the graph reachable from a root."""

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into ``.grad`` of every
    reachable tensor with ``requires_grad``."""
    if loss.data.ndim != 0:
        raise ValueError("backward requires a scalar loss tensor")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(a.data / b.data, "div", (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data**p, "pow", (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _node(out_data, "exp", (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g / a.data,)

    return _node(np.log(a.data), "log", (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out_data,)

    return _node(out_data, "sqrt", (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out_data * out_data),)

    return _node(out_data, "tanh", (a,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh form). Smooth, so finite-difference
    gradient checks are robust, unlike ReLU's kink."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(0.5 * x * (1.0 + t), "gelu", (a,), vjp)


def arccos_clamped(a, eps: float = 1e-7) -> Tensor:
    """arccos of the input clamped to [-1+eps, 1-eps].

    ``eps=0`` clamps exactly to [-1, 1]; the gradient is then defined as 0
    at the boundary (the clamp is flat outside it).
    """
    a = as_tensor(a)
    lo, hi = -1.0 + eps, 1.0 - eps
    clamped = np.clip(a.data, lo, hi)

    def vjp(g):
        inside = (a.data > lo) & (a.data < hi)
        denom = np.sqrt(1.0 - clamped * clamped)
        grad = np.where(inside, -1.0 / np.where(inside, denom, 1.0), 0.0)
        return (g * grad,)

    return _node(np.arccos(clamped), "arccos", (a,), vjp)


# ---------------------------------------------------------------------------
# contractions and reductions

def _fixed_order_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(..., M, K) @ (..., K, N) accumulating over K in index order.

    Unlike BLAS, each output element's summation order is independent of the
    other matrix extents, which keeps per-row results identical between a
    prefix pass and a full-sequence pass.
    """
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(batch + (a.shape[-2], b.shape[-1]))
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., None, k, :]
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(_fixed_order_matmul(a.data, b.data), "matmul", (a, b), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out_data, "sum", (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out_data, "mean", (a,), vjp)


def _sequential_last_axis_sum(e: np.ndarray) -> np.ndarray:
    s = np.zeros(e.shape[:-1])
    for k in range(e.shape[-1]):
        s = s + e[..., k]
    return s[..., None]


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis. ``mask`` (boolean, broadcastable) marks
    the positions allowed to receive probability; masked positions get an
    exact zero. Each row must keep at least one unmasked position."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("softmax over a fully masked row")
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / _sequential_last_axis_sum(e)

    def vjp(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, "softmax", (a,), vjp)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply an
    elementwise affine map."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        ggain = _reduce_to(g * xhat, gain.shape)
        gbias = _reduce_to(g, bias.shape)
        h = g * gain.data
        hm = np.mean(h, axis=-1, keepdims=True)
        hxm = np.mean(h * xhat, axis=-1, keepdims=True)
        gx = inv * (h - hm - xhat * hxm)
        return gx, ggain, gbias

    return _node(xhat * gain.data + bias.data, "layer_norm", (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(a.data.reshape(shape), "reshape", (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _node(a.data.transpose(axes).copy(), "transpose", (a,), vjp)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _node(np.swapaxes(a.data, axis1, axis2).copy(), "swapaxes", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, vjp)


def _is_advanced_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    advanced = _is_advanced_index(index)

    def vjp(g):
        ga = np.zeros(a.shape)
        if advanced:
            np.add.at(ga, index, g)
        else:
            ga[index] += g
        return (ga,)

    return _node(np.array(a.data[index], dtype=np.float64), "getitem", (a,), vjp)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("embedding lookup with empty id array")
    if np.any(ids < 0) or np.any(ids >= weight.shape[0]):
        raise ValueError("embedding id out of range")

    def vjp(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids, g)
        return (gw,)

    return _node(weight.data[ids], "embedding", (weight,), vjp)


# ---------------------------------------------------------------------------
# composites

def dot_last(a, b) -> Tensor:
    """Inner product along the last axis."""
    return tsum(mul(a, b), axis=-1)


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis (composite of primitives)."""
    a, b = as_tensor(a), as_tensor(b)
    num = dot_last(a, b)
    na = sqrt(tsum(mul(a, a), axis=-1))
    nb = sqrt(tsum(mul(b, b), axis=-1))
    return div(num, mul(na, nb))


def quat_dot(a, b) -> Tensor:
    """Quaternion inner products over the last axis of 4 (composite)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 4 or b.shape[-1] != 4:
        raise ValueError("quat_dot expects a trailing axis of size 4")
    return dot_last(a, b)


def logsumexp_last(a) -> Tensor:
    """log(sum(exp(x))) over the last axis, computed with a detached max
    shift for stability (the shift cancels in the gradient)."""
    a = as_tensor(a)
    m = np.max(a.data, axis=-1, keepdims=True)
    shifted = sub(a, Tensor(m))
    return add(log(tsum(exp(shifted), axis=-1)), Tensor(np.squeeze(m, axis=-1)))


def logmeanexp_last(a) -> Tensor:
    a = as_tensor(a)
    n = a.shape[-1]
    return sub(logsumexp_last(a), Tensor(np.log(float(n))))
