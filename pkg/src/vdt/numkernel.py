"""Dense arrays with a reverse-mode differentiation tape.

Storage is a row-major numpy array; every operation below records the
parents and a backward rule so that :func:`backward` can produce exact
gradients for any scalar built from the supported ops.  Only the shapes the
VDT forward pass and its losses need are supported.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = True

_GELU_C = math.sqrt(2.0 / math.pi)


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check(arr, where):
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values in result")
    return arr


class Tensor:
    """Shape-carrying real array, optionally a node of the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, order="C")
        self.data = _check(arr, name or "leaf")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


DenseArray = Tensor


def tensor(data, requires_grad=False, name=None, dtype=None):
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _make(data, parents, backward, op):
    """Wrap an op result, recording it on the tape when any parent needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = _check(data, op)
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_dtype(*ts):
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"mixed precision operands: {dt} and {t.data.dtype}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    _same_dtype(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def softplus(a):
    """ln(1 + exp(a)), evaluated without overflow."""
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def backward(g):
        sig = np.exp(-np.logaddexp(0.0, -x)).astype(x.dtype)
        return (g * sig,)

    return _make(out, (a,), backward, "softplus")


def minimum(a, value):
    """Elementwise min against a constant; gradient passes where a < value."""
    mask = a.data < value
    out = np.where(mask, a.data, value).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * mask,), "minimum")


def maximum(a, value):
    """Elementwise max against a constant; gradient passes where a > value."""
    mask = a.data > value
    out = np.where(mask, a.data, value).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * mask,), "maximum")


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


# -- reductions and shape ops --------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def _is_basic_index(key):
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in keys)


def getitem(a, key):
    out = np.array(a.data[key], dtype=a.dtype)
    basic = _is_basic_index(key)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = list(tensors)
    _same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal leading dims."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul operands must be Tensors")
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- fused normalisation ops -----------------------------------------------------

def softmax_rows(x):
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax_rows(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-6):
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    _same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        lead = g.reshape(-1, d)
        gg = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gb = lead.sum(axis=0)
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


# -- differentiation ---------------------------------------------------------------

def _topological(root):
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


def backward(loss):
    """Gradients of a scalar ``loss`` w.r.t. every leaf that requires grad.

    Returns ``{leaf: grad}`` and also stores each gradient on ``leaf.grad``.
    Gradients are recomputed from scratch, so repeated calls agree.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar root, got shape {shape}")
    grads = {}
    if not loss.requires_grad:
        return grads
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=parent.dtype)
    for leaf, g in grads.items():
        leaf.grad = g
    return grads


def grad_check(f, params, h=1e-5, max_entries_per_param=None, seed=0):
    """Largest relative error between ``backward`` and central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor computed from
    ``params``.  With ``max_entries_per_param`` set, a seeded subset of each
    parameter's entries is probed instead of all of them.
    """
    if h <= 0:
        raise ContractError("grad_check step h must be positive")
    params = list(params)
    grads = backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idx = np.sort(rng.choice(flat.size, max_entries_per_param, replace=False))
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
