"""Small reverse-mode automatic differentiation engine on top of numpy.

Every differentiable primitive produces a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.  Node
ids come from a global counter, so sorting reachable nodes by id gives an exact
topological order (the recording order of the tape).

Only the broadcasting patterns the registration pipeline needs are exercised
(leading-axis and per-channel); elementwise ops reduce broadcast gradients back
to the operand shape.
"""

import contextlib
import itertools
import threading

import numpy as np

from .errors import ContractError, DimensionError

_ids = itertools.count()
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_selections():
    """Collect argmin/argmax index arrays chosen by selection primitives.

    Used by gradient checks to detect perturbations that cross a tie.
    """
    prev = getattr(_state, "selections", None)
    log = []
    _state.selections = log
    try:
        yield log
    finally:
        _state.selections = prev


def _log_selection(idx):
    log = getattr(_state, "selections", None)
    if log is not None:
        log.append(idx)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _not_scalar(shape):
    raise ContractError(f"expected a scalar tensor, got shape {shape}")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64 if isinstance(x, np.ndarray) and x.dtype == np.float64 else np.float32
    return Tensor(x, dtype=dtype)


def _node(data, parents, backward_fn):
    """Wrap a primitive's output, recording it on the tape when needed."""
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a tensor operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(a, dtype=ref.dtype)
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=ref.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a):
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def leaky_relu(x, slope=0.2):
    """max(x, slope * x); the active branch is logged like any other argmax."""
    mask = x.data > 0
    _log_selection(mask)
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,))


# ----------------------------------------------------------------------------
# linear algebra and shape
# ----------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x):
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in tensors]}") from None
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tensors, backward_fn)


def gather(x, index):
    """Rows of ``x`` selected by an integer array of any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ContractError(f"gather index out of range for {x.shape[0]} rows")
    n = x.shape[0]
    tail = x.shape[1:]

    def backward_fn(g):
        flat = g.reshape((index.size,) + tail)
        return (_segment_sum(flat, index.reshape(-1), n),)

    return _node(x.data[index], (x,), backward_fn)


def _segment_sum(values, seg, n):
    width = int(np.prod(values.shape[1:], dtype=np.int64))
    flat = values.reshape(len(seg), width)
    out = np.zeros((n, width), dtype=values.dtype)
    if len(seg):
        order = np.argsort(seg, kind="stable")
        sorted_seg = seg[order]
        starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
        out[sorted_seg[starts]] = np.add.reduceat(flat[order], starts, axis=0)
    return out.reshape((n,) + values.shape[1:])


def segment_sum(x, seg, n):
    """out[s] = sum of rows x[e] with seg[e] == s (adjoint of gather)."""
    seg = np.asarray(seg)
    if seg.shape != (x.shape[0],):
        raise DimensionError(f"segment ids {seg.shape} do not match rows of {x.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= n):
        raise ContractError("segment id out of range")
    return _node(_segment_sum(x.data, seg, n), (x,), lambda g: (g[seg],))


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _node(np.asarray(out), (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_abs_error(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mean_abs_error shape mismatch: {a.shape} vs {b.shape}")
    a, b = _pair(a, b)
    diff = a.data - b.data
    n = diff.size
    if n == 0:
        raise ContractError("mean_abs_error of empty tensors")
    out = np.asarray(np.abs(diff).sum(dtype=np.float64) / n, dtype=a.dtype)
    sign = np.sign(diff)
    _log_selection(sign)

    def backward_fn(g):
        s = sign * (g / n)
        return (s, -s)

    return _node(out, (a, b), backward_fn)


def _select(x, axis, pick):
    ax = axis % x.ndim
    idx = pick(x.data, axis=ax)
    _log_selection(idx)
    idx_k = np.expand_dims(idx, ax)
    values = np.take_along_axis(x.data, idx_k, axis=ax).squeeze(ax)
    shape = x.shape

    def backward_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, idx_k, np.expand_dims(g, ax), axis=ax)
        return (out,)

    return _node(values, (x,), backward_fn), idx


def min_select(x, axis=-1):
    """Minimum along ``axis`` and its first-occurrence index.

    The backward pass routes the whole incoming gradient to the selected entry.
    """
    if x.shape[axis] < 1:
        raise ContractError("min_select over an empty axis")
    return _select(x, axis, np.argmin)


def max_select(x, axis=-1):
    if x.shape[axis] < 1:
        raise ContractError("max_select over an empty axis")
    return _select(x, axis, np.argmax)


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), backward_fn)


def instance_norm(x, gain, bias, eps=1e-5):
    """Per-channel normalisation over the row axis of an ``n x c`` tensor.

    Uses the population variance; statistics accumulate in float64.
    """
    if x.ndim != 2:
        raise DimensionError(f"instance_norm expects n x c, got {x.shape}")
    n, c = x.shape
    if n == 0:
        raise ContractError("instance_norm of an empty input")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"gain/bias shapes {gain.shape}/{bias.shape} do not match {c} channels")
    if eps <= 0:
        raise ContractError("eps must be positive")
    x64 = x.data.astype(np.float64)
    mu = x64.sum(axis=0) / n
    centered = x64 - mu
    var = (centered * centered).sum(axis=0) / n
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).astype(x.dtype)
    gd = gain.data
    out = xhat * gd + bias.data
    inv_std = inv_std.astype(x.dtype)

    def backward_fn(g):
        gh = g * gd
        dx = inv_std * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return (dx.astype(g.dtype), (g * xhat).sum(axis=0), g.sum(axis=0))

    return _node(out, (x, gain, bias), backward_fn)


# ----------------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------------


def _reachable(output):
    seen = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(output, wrt=None):
    """Reverse accumulation from a scalar output.

    Leaf tensors with ``requires_grad`` receive a fresh ``.grad`` (not
    accumulated across calls).  When ``wrt`` is given, the gradients for those
    tensors are returned in order; unreachable ones come back as exact zeros.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {}
    if output.requires_grad:
        grads[output._id] = np.ones(output.shape, dtype=output.dtype)
    for node in _reachable(output):
        g = grads.get(node._id)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    if wrt is None:
        return None
    result = []
    for t in wrt:
        g = grads.get(t._id)
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
            t.grad = g
        result.append(g)
    return result
