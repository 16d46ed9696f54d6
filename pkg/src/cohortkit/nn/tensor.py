"""Dense tensors with reverse-mode automatic differentiation.

Data lives in numpy arrays (float32 for training, float64 for the gradient
checker's shadow mode). Every op that sees a `requires_grad` input records a
backward closure; `backward` walks the recorded graph in reverse topological
order and accumulates into `.grad`. Gradients accumulate across calls until
explicitly zeroed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, DegenerateInputError, DimensionError, ParameterError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # Copy: closures may hand out views of buffers they still own.
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(np.matmul(a.data, b.data), (a, b), backward)


def pow_const(a, p: float):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1))

    return _result(a.data ** p, (a,), backward)


def square(a):
    return mul(a, a)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g / (2.0 * out_data))

    return _result(out_data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), backward)


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _result(out_data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _result(out_data, (a,), backward)


def relu(a):
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _result(np.maximum(a.data, 0.0), (a,), backward)


def softplus(a):
    """log(1 + exp(x)), numerically stable via logaddexp."""
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return _result(np.logaddexp(a.dtype.type(0.0), a.data), (a,), backward)


# -- reductions and shape ops -----------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = _as_tensor(a)
    old_shape = a.shape

    def backward(g):
        _accumulate(a, g.reshape(old_shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), backward)


def swap_last(a):
    axes = list(range(_as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, key):
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _accumulate(a, full)

    return _result(a.data[key], (a,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def take_rows(table, ids):
    """Embedding lookup: rows of `table` selected by an integer array.

    Output shape is ids.shape + table.shape[1:]; the gradient scatter-adds
    into the table so repeated ids accumulate.
    """
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("take_rows expects integer ids")

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))

    return _result(table.data[ids], (table,), backward)


def gather_last(a, idx):
    """Pick one entry along the last axis per leading position."""
    a = _as_tensor(a)
    idx = np.asarray(idx)

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            flat = a.grad.reshape(-1, a.shape[-1])
            rows = np.arange(flat.shape[0])
            np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))

    data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    return _result(data, (a,), backward)


# -- composite numerics ------------------------------------------------

def softmax(x, temperature: float = 1.0, axis: int = -1):
    """Temperature softmax, stabilized by (detached) max subtraction."""
    x = _as_tensor(x)
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    shifted = mul(sub(x, Tensor(x.data.max(axis=axis, keepdims=True))), 1.0 / temperature)
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(x, axis: int = -1):
    x = _as_tensor(x)
    shifted = sub(x, Tensor(x.data.max(axis=axis, keepdims=True)))
    return sub(shifted, log(tsum(exp(shifted), axis=axis, keepdims=True)))


def logsumexp(x, axis: int = -1, keepdims: bool = False):
    x = _as_tensor(x)
    m = Tensor(x.data.max(axis=axis, keepdims=True))
    out = add(log(tsum(exp(sub(x, m)), axis=axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, tuple(s for i, s in enumerate(out.shape) if i != (axis % x.ndim)))
    return out


def cross_entropy_logits(logits, rows, cols, reduction: str = "mean"):
    """Fused softmax cross-entropy over selected (row, col) positive pairs.

    `logits` is 2-D; each pair contributes lse(logits[row]) - logits[row, col].
    Rows may repeat (several positives per row). Single-pass softmax forward
    and a single-array backward, which matters for vocabulary-sized logits.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects 2-D logits, got {logits.shape}")
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    if rows.shape != cols.shape:
        raise DimensionError("rows and cols must have equal length")
    if reduction not in ("mean", "sum"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    probs = np.exp(x - m)
    se = probs.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se)).reshape(-1)
    losses = lse[rows] - x[rows, cols]
    value = losses.mean() if reduction == "mean" else losses.sum()
    probs /= se

    def backward(g):
        w = float(g) / (len(rows) if reduction == "mean" else 1.0)
        row_w = np.zeros(x.shape[0], dtype=x.dtype)
        np.add.at(row_w, rows, w)
        grad = probs * row_w[:, None]
        np.subtract.at(grad, (rows, cols), w)
        _accumulate(logits, grad)

    return _result(np.asarray(value, dtype=x.dtype), (logits,), backward)


def cosine_similarity(a, b):
    """Cosine of the angle between two 1-D vectors; rejects zero vectors."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine_similarity expects matching 1-D vectors, got {a.shape}, {b.shape}")
    if np.linalg.norm(a.data) == 0.0 or np.linalg.norm(b.data) == 0.0:
        raise DegenerateInputError("cosine_similarity is undefined for zero vectors")
    num = tsum(mul(a, b))
    return div(num, mul(sqrt(tsum(square(a))), sqrt(tsum(square(b)))))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12):
    norm = sqrt(add(tsum(square(x), axis=axis, keepdims=True), eps))
    return div(x, norm)


# -- backward pass -----------------------------------------------------

def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar; accumulates into .grad buffers."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological order (graphs exceed the recursion limit).
    order = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
