"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Operations executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor with ``requires_grad`` are appended to the tape together with a closure
computing input gradients from the output gradient. :func:`backward` walks the
tape once, in reverse, and returns the gradients of every named leaf reached by
the loss. A tape can be consumed only once.
"""

import itertools
import threading

import numpy as np

from . import kernels

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "matmul",
    "concat",
    "reshape",
    "swapaxes",
    "sum",
    "mean",
    "layer_norm",
    "softmax_lastdim",
    "gelu",
    "dropout",
    "backward",
    "grad_check",
]

_ids = itertools.count(1)
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, reused tape, ...)."""


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, grad_fn):
        for t in inputs:
            if t.requires_grad and t.name is not None and t.node_id not in self.leaves:
                self.leaves[t.node_id] = t
        self.nodes.append((out.node_id, inputs, grad_fn))


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "node_id")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def __repr__(self):
        extra = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{extra})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return _add(_as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; divide by a scalar")
        return _mul(self, _as_tensor(1.0 / other))

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name):
    """A named leaf that participates in gradients."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data, inputs, grad_fn):
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        if tape.consumed:
            raise ContractError("tape was already consumed by backward; record a new one")
        tape.record(out, inputs, grad_fn)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _add(a, b):
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {list(a.shape)} and {list(b.shape)}") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {list(a.shape)} and {list(b.shape)}") from None
    ad, bd = a.data, b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), grad_fn)


def reshape(x, shape):
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {list(src)} to {list(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),))


def swapaxes(x, a1, a2):
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def _is_basic_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in parts)


def _getitem(x, key):
    src = x.shape
    basic = _is_basic_index(key)

    def grad_fn(g):
        gx = np.zeros(src)
        if basic:
            gx[key] = g  # basic indexing never repeats an element
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), grad_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [list(t.shape) for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def _rows(arr):
    return np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]), dtype=np.float64)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm width {d} does not match gamma {list(gamma.shape)} / beta {list(beta.shape)}"
        )
    k = kernels.backend
    y, xhat, rstd = k.layer_norm_forward(_rows(x.data), gamma.data, beta.data, float(eps))
    gd = gamma.data

    def grad_fn(g):
        dx, dgamma, dbeta = k.layer_norm_backward(_rows(g), xhat, rstd, gd)
        return dx.reshape(x.shape), dgamma, dbeta

    return _make(y.reshape(x.shape), (x, gamma, beta), grad_fn)


def softmax_lastdim(x):
    """Max-subtracted softmax over the last axis."""
    x = _as_tensor(x)
    k = kernels.backend
    y = k.softmax_forward(_rows(x.data))

    def grad_fn(g):
        return (k.softmax_backward(y, _rows(g)).reshape(x.shape),)

    return _make(y.reshape(x.shape), (x,), grad_fn)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    k = kernels.backend
    xr = _rows(x.data)

    def grad_fn(g):
        return (k.gelu_backward(xr, _rows(g)).reshape(x.shape),)

    return _make(k.gelu_forward(xr).reshape(x.shape), (x,), grad_fn)


def dropout(x, p, rng):
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def backward(loss, tape):
    """Gradients of a scalar ``loss`` w.r.t. every named leaf on ``tape``.

    Returns a dict ``name -> ndarray`` holding only the leaves the loss actually
    reaches. The tape is consumed; calling this twice on one tape raises.
    """
    if tape.consumed:
        raise ContractError("backward already ran on this tape; record a new forward pass")
    if loss.ndim != 0:
        raise ContractError(f"loss must be a 0-dimensional tensor, got shape {list(loss.shape)}")
    if not any(nid == loss.node_id for nid, _, _ in reversed(tape.nodes)):
        raise ContractError("loss was not recorded on this tape")
    tape.consumed = True

    grads = {loss.node_id: np.ones(())}
    for out_id, inputs, grad_fn in reversed(tape.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if not t.requires_grad or gi is None:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi

    result = {}
    for nid, leaf in tape.leaves.items():
        if nid in grads:
            g = np.asarray(grads[nid], dtype=np.float64).reshape(leaf.shape)
            result[leaf.name] = result[leaf.name] + g if leaf.name in result else g.copy()
    return result


def grad_check(f, params, eps=1e-6):
    """Largest relative error between tape gradients and central differences.

    ``f`` maps a dict of named :class:`Tensor` leaves to a scalar Tensor and must
    be deterministic. ``params`` maps names to arrays. The error of one entry is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"grad_check eps must lie in [1e-7, 1e-3], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(arrays):
        return float(f({k: Tensor(v) for k, v in arrays.items()}).data)

    if value(base) != value(base):
        raise ContractError("grad_check requires a deterministic function")

    with Tape() as tape:
        loss = f({k: parameter(v, k) for k, v in base.items()})
    analytic = backward(loss, tape)

    worst = 0.0
    for name, arr in base.items():
        ga = analytic.get(name, np.zeros_like(arr)).ravel()
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = value(base)
            flat[i] = orig - eps
            down = value(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ga[i] - numeric) / (abs(ga[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
