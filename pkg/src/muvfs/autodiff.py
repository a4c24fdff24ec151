"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation validates its output for NaN/Inf and records a node on the
implicit graph (parent links) when gradients are required.  Backward passes
express each vector-Jacobian product with the same tensor operations, so
calling :func:`grad` with ``create_graph=True`` yields gradients that are
themselves differentiable (needed for second-order meta-updates).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext

import numpy as np


class AutodiffError(Exception):
    """Base error for graph construction and backward passes."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_state = threading.local()


def _grad_on() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_on()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_vjp", "_double_ok")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor: non-finite values in input data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None
        self._parents = ()
        self._vjp = None
        self._double_ok = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op!r})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _result(data, op: str, parents, vjp, double_ok: bool = True) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._vjp = vjp
        out._double_ok = double_ok
    else:
        out.requires_grad = False
        out._op = None
        out._parents = ()
        out._vjp = None
        out._double_ok = True
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not broadcastable")

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _result(data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are not broadcastable")

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape))

    return _result(data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable")

    def vjp(g):
        return (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape))

    return _result(data, "mul", (a, b), vjp)


def scale(a, s: float) -> Tensor:
    a = _coerce(a)
    s = float(s)

    def vjp(g):
        return (scale(g, s),)

    return _result(a.data * s, "scale", (a,), vjp)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return _result(a.data @ b.data, "matmul", (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _result(np.transpose(a.data, axes), "transpose", (a,), vjp)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def vjp(g):
        return (mul(g, mask),)

    return _result(np.maximum(a.data, 0.0), "relu", (a,), vjp, double_ok=False)


def clamp_min(a, lo: float) -> Tensor:
    a = _coerce(a)
    mask = Tensor((a.data > lo).astype(np.float64))

    def vjp(g):
        return (mul(g, mask),)

    return _result(np.maximum(a.data, lo), "clamp_min", (a,), vjp)


def exp(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    ref = []

    def vjp(g):
        return (mul(g, ref[0]),)

    out = _result(data, "exp", (a,), vjp)
    ref.append(out)
    return out


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def vjp(g):
        return (mul(g, reciprocal(a)),)

    return _result(data, "log", (a,), vjp)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    ref = []

    def vjp(g):
        return (scale(mul(g, reciprocal(ref[0])), 0.5),)

    out = _result(data, "sqrt", (a,), vjp)
    ref.append(out)
    return out


def reciprocal(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore"):
        data = 1.0 / a.data
    ref = []

    def vjp(g):
        return (scale(mul(g, mul(ref[0], ref[0])), -1.0),)

    out = _result(data, "reciprocal", (a,), vjp)
    ref.append(out)
    return out


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _coerce(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        ones = Tensor(np.ones(in_shape))
        if axis is None:
            return (mul(g, ones),)
        if keepdims:
            return (mul(g, ones),)
        kshape = list(in_shape)
        for ax in axis:
            kshape[ax if ax >= 0 else len(in_shape) + ax] = 1
        return (mul(reshape(g, tuple(kshape)), ones),)

    return _result(data, "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.shape
    try:
        data = np.reshape(a.data, shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}")

    def vjp(g):
        return (reshape(g, old),)

    return _result(data, "reshape", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        )
    extents = [t.shape[axis] for t in tensors]

    def vjp(g):
        outs, off = [], 0
        for ext in extents:
            outs.append(narrow(g, axis, off, ext))
            off += ext
        return tuple(outs)

    return _result(data, "concat", tuple(tensors), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _coerce(a)
    extent = a.shape[axis]
    if start < 0 or start + length > extent:
        raise ShapeError(f"narrow: slice [{start}:{start + length}) outside extent {extent}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    before, after = start, extent - start - length

    def vjp(g):
        return (_pad_axis(g, axis, before, after),)

    return _result(a.data[tuple(idx)], "narrow", (a,), vjp)


def _pad_axis(a, axis: int, before: int, after: int) -> Tensor:
    a = _coerce(a)
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    length = a.shape[axis]

    def vjp(g):
        return (narrow(g, axis, before, length),)

    return _result(np.pad(a.data, widths), "pad", (a,), vjp)


# ---------------------------------------------------------------------------
# composite operations (differentiable through the primitives above)


def softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))  # detached; shift-invariant
    z = sub(x, shift)
    e = exp(z)
    return mul(e, reciprocal(sum(e, axis=axis, keepdims=True)))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    z = sub(x, shift)
    out = add(shift, log(sum(exp(z), axis=axis, keepdims=True)))
    if keepdims:
        return out
    red = np.sum(x.data, axis=axis, keepdims=False).shape
    return reshape(out, red)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def l2_normalize(x, axis: int = -1, eps: float = 1e-9) -> Tensor:
    """Divide by max(norm, eps); exactly unit-norm whenever the norm exceeds eps."""
    x = _coerce(x)
    n = sqrt(sum(mul(x, x), axis=axis, keepdims=True))
    return mul(x, reciprocal(clamp_min(n, eps)))


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-9) -> Tensor:
    return sum(mul(l2_normalize(a, axis, eps), l2_normalize(b, axis, eps)), axis=axis)


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels against rows of logits."""
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError(f"cross_entropy: label outside [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = sum(mul(log_softmax(logits, axis=-1), Tensor(onehot)))
    return scale(picked, -1.0 / n)


# ---------------------------------------------------------------------------
# backward passes


def _topo(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt, create_graph: bool = False):
    """Gradients of a scalar loss with respect to each tensor in ``wrt``.

    Tensors that do not participate in the loss graph receive zeros.  With
    ``create_graph=True`` the returned gradients carry their own graph, so a
    second call differentiates through the first (gradient-of-gradient); ops
    outside the double-differentiable subset raise in that mode.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward: loss must be a Tensor")
    if loss.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._op is None:
        raise AutodiffError("backward: loss has no computation graph")

    wrt = list(wrt)
    order = _topo(loss)
    grads = {id(loss): Tensor(np.ones(loss.shape))}
    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            if create_graph and not node._double_ok:
                raise AutodiffError(
                    f"backward_of_backward: op '{node._op}' is outside the "
                    "double-differentiable subset"
                )
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else add(acc, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


def backward(loss: Tensor, leaves=None):
    """Populate ``.grad`` (accumulating) on leaves; returns the gradient map.

    When ``leaves`` is None, the requires-grad leaves reachable from the loss
    are used; passing leaves explicitly also assigns zeros to any that do not
    participate in the graph.
    """
    if leaves is None:
        if not isinstance(loss, Tensor) or loss._op is None:
            raise AutodiffError("backward: loss has no computation graph")
        leaves = [n for n in _topo(loss) if n._vjp is None and n.requires_grad]
    leaves = list(leaves)
    gs = grad(loss, leaves)
    result = {}
    for leaf, g in zip(leaves, gs):
        leaf.grad = g.data if leaf.grad is None else leaf.grad + g.data
        result[leaf] = g
    return result


def graph_nodes(root: Tensor):
    """Topologically ordered op records reachable from ``root`` (for inspection)."""
    return [(n._op, n.shape, tuple(p.shape for p in n._parents)) for n in _topo(root)]
