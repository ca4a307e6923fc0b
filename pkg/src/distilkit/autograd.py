"""Float64 tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a :class:`Tensor` that remembers the
operation node that produced it.  Nodes are numbered as they are created, so
the numbering is a topological order of the graph by construction; the
backward pass walks the reachable nodes in decreasing number and visits each
exactly once.

Storage is a row-major numpy ``float64`` array.  Broadcasting follows numpy
rules; gradients of broadcast operands are summed back to the operand shape.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, ParameterError

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (teacher forwards, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("id", "kind", "inputs", "backward_fn")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._node = None
        self.name = name

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite values produced by '{kind}'")
    t = Tensor.__new__(Tensor)
    t.data = out
    t._grad = None
    t.name = None
    t._node = None
    needs = _grad_enabled and any(x.requires_grad for x in inputs)
    t.requires_grad = needs
    if needs:
        t._node = Node(kind, tuple(inputs), backward_fn)
    return t


def _broadcast_check(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are not conformable") from exc


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _make("pow", a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def minimum(a, c: float) -> Tensor:
    """Elementwise ``min(a, c)`` against a constant; ties route the gradient to ``a``."""
    a = as_tensor(a)
    mask = a.data <= c
    return _make("minimum", np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def maximum(a, c: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= c
    return _make("maximum", np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


# -- reductions -----------------------------------------------------------------
def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out, dtype=np.float64), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)
    return _make("mean", np.asarray(out, dtype=np.float64), (a,),
                 lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


# -- shape manipulation ------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


def getitem(a, index) -> Tensor:
    """Slicing and integer-array gathering."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from exc

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.array(out, dtype=np.float64), (a,), bw)


# -- linear algebra -----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape} inner dimensions differ")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: {exc}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def scaled_dot(q, k) -> Tensor:
    """``q @ k^T / sqrt(d)`` where ``d`` is the last dimension."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"scaled-dot-product: last dims {q.shape[-1]} and {k.shape[-1]} differ")
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = np.swapaxes(k.data, -1, -2)
    out = np.matmul(q.data, kt) * scale

    def bw(g):
        gq = np.matmul(g, k.data) * scale
        gk = np.matmul(np.swapaxes(g, -1, -2), q.data) * scale
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape)

    return _make("scaled-dot-product", out, (q, k), bw)


# -- nonlinearities ------------------------------------------------------------------
def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    _check_temperature(temperature)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=axis, keepdims=True))) / temperature,)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    _check_temperature(temperature)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def bw(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make("log-softmax", out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), bw)


def layernorm(a, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    a, weight, bias = as_tensor(a), as_tensor(weight), as_tensor(bias)
    if weight.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise DimensionError(f"layernorm: weight/bias must have shape {a.shape[-1:]}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        gx_hat = g * weight.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, gw, gb

    return _make("layernorm", out, (a, weight, bias), bw)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make("embedding", out, (weight,), bw)


# -- dispatcher -----------------------------------------------------------------------
_OPS = {
    "add": lambda xs, at: add(*xs),
    "sub": lambda xs, at: sub(*xs),
    "mul": lambda xs, at: mul(*xs),
    "div": lambda xs, at: div(*xs),
    "matmul": lambda xs, at: matmul(*xs),
    "transpose": lambda xs, at: transpose(xs[0], at.get("axes")),
    "reshape": lambda xs, at: reshape(xs[0], at["shape"]),
    "softmax": lambda xs, at: softmax(xs[0], at.get("axis", -1), at.get("temperature", 1.0)),
    "log-softmax": lambda xs, at: log_softmax(xs[0], at.get("axis", -1), at.get("temperature", 1.0)),
    "log": lambda xs, at: log(xs[0]),
    "exp": lambda xs, at: exp(xs[0]),
    "mean": lambda xs, at: mean(xs[0], at.get("axis"), at.get("keepdims", False)),
    "sum": lambda xs, at: tsum(xs[0], at.get("axis"), at.get("keepdims", False)),
    "layernorm": lambda xs, at: layernorm(*xs, eps=at.get("eps", 1e-5)),
    "gelu": lambda xs, at: gelu(xs[0]),
    "embedding-lookup": lambda xs, at: embedding(xs[0], at["ids"]),
    "scaled-dot-product": lambda xs, at: scaled_dot(*xs),
    "concat": lambda xs, at: concat(xs, at.get("axis", 0)),
    "slice": lambda xs, at: getitem(xs[0], at["index"]),
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply a named operation; see ``OP_KINDS`` for the accepted kinds."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ParameterError(f"unknown op kind {kind!r}") from None
    return fn([as_tensor(x) for x in inputs], attrs or {})


# -- backward ----------------------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a graph")
    if loss._node is None:
        loss._grad = np.ones_like(loss.data) if loss._grad is None else loss._grad + 1.0
        return

    # collect reachable nodes
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.id in nodes:
            continue
        nodes[node.id] = t
        stack.extend(x for x in node.inputs if x.requires_grad)

    grads = {id(loss): np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t._node.backward_fn(g)
        for x, gx in zip(t._node.inputs, input_grads):
            if not x.requires_grad or gx is None:
                continue
            if x._node is None:
                x._grad = np.array(gx, dtype=np.float64) if x._grad is None else x._grad + gx
            else:
                key = id(x)
                grads[key] = grads[key] + gx if key in grads else np.array(gx, dtype=np.float64)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.  The
    error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if not 0 < eps <= 1e-3:
        raise ParameterError("eps must lie in (0, 1e-3]")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.copy()

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base)).item()
            flat[i] = orig - eps
            fm = f(Tensor(base)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
