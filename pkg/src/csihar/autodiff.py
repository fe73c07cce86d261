"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on :class:`Tensor` objects that require gradients records a
node holding its inputs and a closure mapping the output gradient to input
gradients.  :func:`backward` walks that graph once in reverse topological
order and then frees it, so a graph can be differentiated exactly once.

Broadcasting is deliberately narrow: binary elementwise ops accept operands
of equal shape or a scalar (Python number or 0-d tensor) against a tensor.
Bias addition over rows is provided by :func:`linear` and :func:`conv1d`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from csihar.errors import DomainError, GraphError, ShapeError

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """An n-dimensional real array that can take part in differentiation.

    The value buffer is treated as immutable; optimizers replace ``data``
    rather than writing into it.  ``grad`` is populated on leaves that
    require gradients when :func:`backward` runs and accumulates across calls
    until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_freed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    # -- properties -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Graph":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


@dataclass
class Graph:
    """Record of one backward sweep.

    ``nodes`` is in topological order (inputs before consumers) and
    ``contributions[i]`` counts the gradient messages that reached
    ``nodes[i]``, which equals that node's fan-out inside the graph.
    """

    nodes: list = field(default_factory=list)
    contributions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def _node(data: np.ndarray, parents: tuple, grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._freed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        for p in parents:
            if p._freed:
                raise GraphError(f"input to {op} belongs to a graph that was already differentiated")
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def topological_order(root: Tensor) -> list:
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


class _SliceGrad:
    """Gradient that is zero outside ``index``; accumulated in place."""

    __slots__ = ("index", "values", "shape", "dtype")

    def __init__(self, index, values, shape, dtype):
        self.index, self.values, self.shape, self.dtype = index, values, shape, dtype


def _accumulate(grads: dict, owned: set, key: int, pg) -> None:
    # buffers in ``owned`` were allocated here and are safe to update in place
    buf = grads.get(key)
    if isinstance(pg, _SliceGrad):
        if buf is None:
            buf = np.zeros(pg.shape, dtype=pg.dtype)
        elif key not in owned:
            buf = buf.copy()
        buf[pg.index] += pg.values
        grads[key] = buf
        owned.add(key)
    elif buf is None:
        grads[key] = pg
    elif key in owned:
        buf += pg
    else:
        grads[key] = buf + pg
        owned.add(key)


def backward(root: Tensor) -> Graph:
    """Differentiate scalar ``root`` with respect to every leaf that requires grad.

    The graph is released afterwards; differentiating it again, or building
    new operations on its interior nodes, raises :class:`GraphError`.
    """
    if root._freed:
        raise GraphError("graph already differentiated; run a fresh forward pass")
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not depend on any tensor that requires grad")

    order = topological_order(root)
    grads = {id(root): np.ones_like(root.data)}
    counts = {id(root): 1}
    owned = set()
    for node in reversed(order):
        g = grads.pop(id(node))
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            counts[key] = counts.get(key, 0) + 1
            _accumulate(grads, owned, key, pg)

    graph = Graph(nodes=order, contributions=[counts[id(n)] for n in order])
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._freed = True
    return graph


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_operands(a, b, op):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op} needs at least one Tensor operand")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is a scalar")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _node(ad * bd, (a, b), grad_fn, "mul")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        bad = x.data[x.data <= 0].reshape(-1)[0]
        raise DomainError(f"log of non-positive value {bad!r}")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` [N x in], ``weight`` [out x in], ``bias`` [out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _node(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")
    out = out + bias.data
    return _node(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear")


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    if _is_basic_index(index):
        def grad_fn(g):
            return (_SliceGrad(index, g, shape, dtype),)
    else:
        def grad_fn(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

    return _node(np.array(x.data[index]), (x,), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: shapes differ {sorted({t.shape for t in tensors})}") from exc

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, grad_fn, "stack")


# ---------------------------------------------------------------------------
# classification heads
# ---------------------------------------------------------------------------

def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax needs a non-empty class axis, got shape {x.shape}")
    s = _softmax_data(x.data, axis)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _node(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Fused through log-softmax, so the gradient with respect to the logits is
    ``(softmax(logits) - onehot(labels)) / B``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B x K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"cross_entropy: label outside 0..{k - 1}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _node(loss, (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_length(length: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-length // stride)
    if padding == "valid":
        return (length - kernel) // stride + 1 if length >= kernel else 0
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def _same_pad(length: int, kernel: int, stride: int) -> tuple:
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: str = "valid") -> Tensor:
    """1-D cross-correlation over the last axis.

    ``x`` is [B x C_in x T] (or [C_in x T] for one sample) and ``weight`` is
    [C_out x C_in x K]; the result is [B x C_out x T'].
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernels {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be positive, got {stride}")
    b, cin, t = x.shape
    cout, _, k = weight.shape
    if padding == "same":
        left, right = _same_pad(t, k, stride)
    elif padding == "valid":
        if t < k:
            raise ShapeError(f"conv1d: length {t} shorter than kernel {k} with valid padding")
        left = right = 0
    else:
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    tp = xp.shape[2]
    tout = (tp - k) // stride + 1
    # cols: [B, T', C_in, K]
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :tout].transpose(0, 2, 1, 3)
    cols = cols.reshape(b, tout, cin * k)
    wmat = weight.data.reshape(cout, cin * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def grad_fn(g):
        gt = g.transpose(0, 2, 1)  # [B, T', C_out]
        gw = np.einsum("btc,btk->ck", gt, cols).reshape(weight.shape)
        dcols = (gt @ wmat).reshape(b, tout, cin, k)
        dxp = np.zeros_like(xp)
        span = stride * (tout - 1) + 1
        for j in range(k):
            dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, left:left + t]
        grads = (dx, gw) if bias is None else (dx, gw, g.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    y = _node(out, parents, grad_fn, "conv1d")
    return reshape(y, y.shape[1:]) if squeeze else y


def max_pool1d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last axis; a trailing remainder is dropped."""
    *lead, t = x.shape
    tout = t // size
    if tout < 1:
        raise ShapeError(f"max_pool1d: length {t} shorter than pool size {size}")
    blocks = x.data[..., :tout * size].reshape(*lead, tout, size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        full = np.zeros(x.shape, dtype=x.dtype)
        full[..., :tout * size] = gb.reshape(*lead, tout * size)
        return (full,)

    return _node(out, (x,), grad_fn, "max_pool1d")
