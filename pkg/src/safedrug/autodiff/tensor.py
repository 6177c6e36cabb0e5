"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor` holding a closure that maps the
output gradient to gradients for its inputs. ``Tensor.backward`` walks the
graph once in reverse topological order and accumulates into ``.grad``.

Broadcasting is deliberately narrow: operands must share a shape, or the
right-hand operand may be a scalar or a 1-D vector matching the last axis of
a 2-D left operand (a bias row).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import sparse

from safedrug.errors import NonFiniteError, ShapeMismatch

_state = threading.local()


def _checking():
    return getattr(_state, "checked", False)


@contextlib.contextmanager
def checked(enabled=True):
    """Reject NaN/Inf in every forward value and backward gradient."""
    previous = _checking()
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = previous


def _verify(array, what):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, *, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = _op
        self._parents = _parents
        self._backward = _backward
        if _checking():
            _verify(self.data, f"forward output of {_op}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch(f"backward without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        pending = {id(self): np.asarray(grad, dtype=np.float64)}
        check = _checking()
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if check:
                _verify(g, f"gradient of {node.op}")
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward if needs else None, _op=op)


def _broadcast_kind(a, b, op):
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0 or b.size == 1 and b.data.ndim <= 1:
        return "scalar"
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row"
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce(g, kind, shape):
    if kind == "same":
        return g
    if kind == "scalar":
        return np.full(shape, g.sum())
    return g.sum(axis=0)


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "add")
    bshape = b.shape

    def backward(g):
        return g, _reduce(g, kind, bshape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size == 1 and a.data.ndim <= 1:
        # scalar - tensor
        ashape = a.shape

        def backward_scalar(g):
            return np.full(ashape, g.sum()), -g

        return _result(a.data - b.data, (a, b), backward_scalar, "sub")
    kind = _broadcast_kind(a, b, "sub")
    bshape = b.shape

    def backward(g):
        return g, -_reduce(g, kind, bshape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    """Elementwise product."""
    if not isinstance(a, Tensor):
        a, b = b, a
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce(g * ad, kind, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


elementwise_mul = mul


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1:
            return g * bd, g * ad
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward, "matmul")


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward, "sigmoid")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (x,), backward, "tanh")


def relu(x):
    x = as_tensor(x)
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return _result(np.where(active, x.data, 0.0), (x,), backward, "relu")


def log(x):
    x = as_tensor(x)
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _result(np.log(xd), (x,), backward, "log")


def clip(x, low, high):
    """Clamp values; gradient passes only where the value was not clipped."""
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(x.data, low, high), (x,), backward, "clip")


def total(x):
    """Sum of all entries, as a 0-d tensor."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x):
    x = as_tensor(x)
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _result(np.asarray(x.data.mean()), (x,), backward, "mean")


def mean_pool(x):
    """Average over rows of a 2-D tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatch(f"mean_pool expects a non-empty 2-D tensor, got {x.shape}")
    n = x.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(x.data.mean(axis=0), (x,), backward, "mean_pool")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndims = {t.data.ndim for t in tensors}
    if len(ndims) != 1:
        raise ShapeMismatch(f"concat: mixed ranks {[t.shape for t in tensors]}")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), backward, "concat")


_INCIDENCE = {}


def _incidence(index, count):
    """Sparse ``count x len(index)`` 0/1 matrix, cached since graph indices repeat every step."""
    key = (count, index.tobytes())
    op = _INCIDENCE.get(key)
    if op is None:
        if len(_INCIDENCE) > 256:
            _INCIDENCE.clear()
        n = len(index)
        order = np.argsort(index, kind="stable")
        indptr = np.searchsorted(index[order], np.arange(count + 1))
        op = _INCIDENCE[key] = sparse.csr_matrix((np.ones(n), order, indptr), shape=(count, n))
    return op


def scatter_add(index, values, count):
    """``out[index[k]] += values[k]`` into ``count`` rows."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=count).astype(np.float64)
    flat = values.reshape(len(index), -1)
    return np.asarray(_incidence(index, count) @ flat).reshape((count,) + values.shape[1:])


def take(x, index):
    """Gather entries (1-D) or rows (2-D) by ``index``; repeats are allowed."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        return (scatter_add(index, g, shape[0]),)

    return _result(x.data[index], (x,), backward, "take")


def segment_sum(x, segments, count):
    """Sum rows of ``x`` into ``count`` buckets given a bucket id per row."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.intp)
    if segments.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"segment_sum: {segments.shape[0]} ids for {x.shape[0]} rows")
    out = scatter_add(segments, x.data, count)

    def backward(g):
        return (g[segments],)

    return _result(out, (x,), backward, "segment_sum")


def segment_mean(x, segments, count):
    segments = np.asarray(segments, dtype=np.intp)
    sizes = np.bincount(segments, minlength=count).astype(np.float64)
    if np.any(sizes == 0):
        raise ShapeMismatch("segment_mean: empty segment")
    summed = segment_sum(x, segments, count)
    return mul(summed, Tensor(1.0 / sizes[:, None] * np.ones(summed.shape)))


def embedding_lookup(table, multihot):
    """``multihot @ table``: the sum of the selected rows."""
    table = as_tensor(table)
    multihot = np.asarray(multihot, dtype=np.float64)
    if table.data.ndim != 2 or multihot.shape != (table.shape[0],):
        raise ShapeMismatch(f"embedding_lookup: multihot {multihot.shape} vs table {table.shape}")
    return matmul(Tensor(multihot), table)


def masked_linear(x, weight, mask):
    """``x @ (weight * mask)`` without bias; the weight gradient is zero off-mask."""
    x, weight = as_tensor(x), as_tensor(weight)
    mask = np.asarray(mask, dtype=np.float64)
    if weight.shape != mask.shape or x.data.ndim != 1 or x.shape[0] != weight.shape[0]:
        raise ShapeMismatch(f"masked_linear: x {x.shape}, weight {weight.shape}, mask {mask.shape}")
    effective = weight.data * mask
    xd = x.data

    def backward(g):
        return effective @ g, np.outer(xd, g) * mask

    return _result(xd @ effective, (x, weight), backward, "masked_linear")


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 1 or gain.shape != x.shape or bias.shape != x.shape:
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    n = x.shape[0]
    centered = x.data - x.data.mean()
    inv_std = 1.0 / np.sqrt(centered @ centered / n + eps)
    normed = centered * inv_std
    gd = gain.data

    def backward(g):
        gn = g * gd
        gx = inv_std * (gn - gn.mean() - normed * (gn @ normed) / n)
        return gx, g * normed, g

    return _result(normed * gd + bias.data, (x, gain, bias), backward, "layer_norm")
