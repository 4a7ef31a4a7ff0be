"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op checks its operand shapes explicitly; there is no implicit
broadcasting anywhere. Ops that combine tensors of different rank
(``linear``, ``expand``, ``add_key_bias``) document their one shape rule.

A result records a graph node only when at least one parent requires a
gradient, so frozen subgraphs and ``no_grad`` blocks cost no bookkeeping.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True
_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op: Optional[str] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_counter)

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
    def node(self):
        """(op, parents) for graph tensors, None for leaves and detached tensors."""
        if self._backward is None:
            return None
        return self.op, self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every one of these routes through the checked ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_counter)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape, detail="operands must have identical shapes")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        # reversed so parents are visited left-to-right; order is a pure
        # function of graph structure, which keeps accumulation reproducible
        for p in reversed(node._parents):
            if p.requires_grad and p._id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf
    that requires a gradient. Intermediate gradients are discarded."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        return
    grads = {loss._id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic (identical shapes only)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    """a + c where c is a constant array of a's shape (or a python scalar)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != a.shape:
        raise ShapeError("add_const", a.shape, c.shape)
    return _result(a.data + c, (a,), "add_const", lambda g: (g,))


def add_key_bias(scores: Tensor, bias: np.ndarray) -> Tensor:
    """Add a constant per-key bias to attention scores.

    Rule: scores (B, H, Lq, Lk) + bias (B, Lk); the bias is shared over
    heads and query positions. Used for padding and prefix masks.
    """
    bias = np.asarray(bias, dtype=np.float64)
    if scores.ndim != 4 or bias.shape != (scores.shape[0], scores.shape[3]):
        raise ShapeError("add_key_bias", scores.shape, bias.shape,
                         detail="expected (B,H,Lq,Lk) and (B,Lk)")
    return _result(scores.data + bias[:, None, None, :], (scores,), "add_key_bias",
                   lambda g: (g,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Rules:
      * a (..., m, k) @ b (k, n) -> (..., m, n); a may also be a vector (k,)
      * a (*batch, m, k) @ b (*batch, k, n) with identical batch dims
    """
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="need a.ndim>=1, b.ndim>=2")
    if bd.ndim == 2:
        if ad.shape[-1] != bd.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape, detail="inner dims differ")
        out = ad @ bd

        def fn(g):
            ga = g @ bd.T
            if ad.ndim == 1:
                gb = np.outer(ad, g)
            else:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _result(out, (a, b), "matmul", fn)
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batched operands must share batch dims")
    out = ad @ bd

    def fn_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(out, (a, b), "matmul", fn_batched)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ w + b.

    Rule: x (..., n_in), w (n_in, n_out), b (n_out,); b is added to every
    leading index of the result.
    """
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    if b is not None and b.shape != (wd.shape[1],):
        raise ShapeError("linear", w.shape, b.shape, detail="bias must be (n_out,)")
    out = xd @ wd
    if b is not None:
        out += b.data

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, "linear", fn)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _result(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes must permute all dims")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), "transpose",
                   lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Repeat a along new leading axes.

    Rule: a.shape must equal the trailing dims of ``shape``.
    """
    shape = tuple(shape)
    k = len(shape) - a.ndim
    if k < 0 or shape[k:] != a.shape:
        raise ShapeError("expand", a.shape, shape, detail="source must match trailing dims")
    lead = tuple(range(k))
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), "expand",
                   lambda g: (g.sum(axis=lead),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no operands")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError("concat", tensors[0].shape, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", fn)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing/integer indexing (no fancy indexing)."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (isinstance(i, (int, slice, np.integer)) or i is Ellipsis):
            raise TypeError("getitem supports only ints, slices and Ellipsis")
    out = a.data[idx]
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(np.array(out, dtype=np.float64), (a,), "slice", fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table (V, d), integer ids of any shape -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, detail="table must be (V, d)")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    vshape = table.shape

    def fn(g):
        full = np.zeros(vshape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, vshape[1]))
        return (full,)

    return _result(table.data[ids], (table,), "embedding", fn)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return _result(out, (a,), "gelu", fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.log(x), (a,), "log", lambda g: (g / x,))


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), "sum",
                       lambda g: (np.full(shape, float(g)),))
    axis = axis % a.ndim
    out = a.data.sum(axis=axis)
    return _result(out, (a,), "sum",
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis % a.ndim]
    return scale(sum(a, axis), 1.0 / n)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by gamma and shift by beta (both (d,))."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out, (x, gamma, beta), "layer_norm", fn)


def _check_finite(op: str, x: np.ndarray):
    if np.isnan(x).any():
        raise FloatingPointError(f"{op}: NaN in input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    x = a.data
    _check_finite("softmax", x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (e * (g - (g * e).sum(axis=axis, keepdims=True)),)

    return _result(e, (a,), "softmax", fn)


def masked_softmax(scores: Tensor, key_bias: np.ndarray, scale_by: float) -> Tensor:
    """softmax(scores * scale_by + key_bias) over the last axis, fused.

    Rule: scores (B, H, Lq, Lk), key_bias (B, Lk) shared over heads and
    queries. Equivalent to softmax(add_key_bias(scale(scores))).
    """
    bias = np.asarray(key_bias, dtype=np.float64)
    if scores.ndim != 4 or bias.shape != (scores.shape[0], scores.shape[3]):
        raise ShapeError("masked_softmax", scores.shape, bias.shape,
                         detail="expected (B,H,Lq,Lk) and (B,Lk)")
    x = scores.data * scale_by
    x += bias[:, None, None, :]
    _check_finite("masked_softmax", x)
    x -= x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    e = x

    def fn(g):
        gs = g * e
        gs -= e * gs.sum(axis=-1, keepdims=True)
        gs *= scale_by
        return (gs,)

    return _result(e, (scores,), "masked_softmax", fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite("log_softmax", x)
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), "log_softmax", fn)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of -log softmax(logits)[target].

    logits (C,) with an integer target, or (N, C) with N integer targets.
    """
    single = logits.ndim == 1
    lg = reshape(logits, (1, -1)) if single else logits
    if lg.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape, detail="logits must be (C,) or (N, C)")
    t = np.atleast_1d(np.asarray(target))
    n, c = lg.shape
    if t.shape != (n,):
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    if not np.issubdtype(t.dtype, np.integer) or (t < 0).any() or (t >= c).any():
        raise ValueError(f"cross_entropy: targets must be class indices in [0, {c})")
    x = lg.data
    _check_finite("cross_entropy", x)
    m = x.max(axis=1, keepdims=True)
    logp = x - (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))
    rows = np.arange(n)
    out = np.asarray(-logp[rows, t].mean())

    def fn(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (float(g) / n),)

    return _result(out, (lg,), "cross_entropy", fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target of the same shape."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError("mse", pred.shape, t.shape)
    diff = pred.data - t
    n = diff.size
    return _result(np.asarray((diff * diff).mean()), (pred,), "mse",
                   lambda g: (diff * (2.0 * float(g) / n),))


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


def stack_scalars(ts: Iterable[Tensor]) -> Tensor:
    """Stack 0-d/size-1 tensors into a vector."""
    ts = list(ts)
    return concat([reshape(t, (1,)) for t in ts], axis=0)
