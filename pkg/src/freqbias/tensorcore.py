"""Dense arrays with a small reverse-mode differentiation engine.

The graph is built from coarse primitives (conv2d, matmul, batch norm,
spectral filtering, elementwise maps). Every primitive stores a closure that
maps the gradient of its output to gradients of its parents. ``backward``
walks the recorded graph once in reverse topological order and releases it.

Only scalar-vs-tensor and equal-shape broadcasting are supported; anything
channel-wise goes through a dedicated primitive.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor", "GradTape", "NonFiniteError", "no_grad", "grad_enabled", "apply_op",
    "elementwise", "add", "sub", "mul", "exp", "sigmoid", "relu",
    "matmul", "linear", "conv2d", "reduce_sum", "reduce_mean", "reshape",
    "scale_channels", "circular_conv1d", "batch_norm", "log_softmax", "nll",
    "cross_entropy", "kl_divergence", "backward",
]

DEFAULT_DTYPE = np.float32

_state = threading.local()


class NonFiniteError(ContractError):
    """An operation produced NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._leaf = True

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def apply_op(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a primitive's output and, if needed, record it on the graph.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = np.ascontiguousarray(out)
    t.grad = None
    t.op = op
    t._leaf = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _lift(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = _lift(b, a.dtype)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


def _result_dtype(a: Tensor, b: Tensor):
    # scalars never promote a tensor's precision
    if a.size == 1 and b.size != 1:
        return b.dtype
    if b.size == 1 and a.size != 1:
        return a.dtype
    return np.promote_types(a.dtype, b.dtype)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    dt = _result_dtype(a, b)
    out = (a.data + b.data).astype(dt, copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    dt = _result_dtype(a, b)
    out = (a.data - b.data).astype(dt, copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    dt = _result_dtype(a, b)
    out = (a.data * b.data).astype(dt, copy=False)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), bw, "mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,), "exp")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.maximum(a.data, 0)
    return apply_op(out, (a,), lambda g: (g * mask,), "relu")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "exp": exp, "sigmoid": sigmoid, "relu": relu}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; binary ops require ``b``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with the bias broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(b.dtype)

    return apply_op(out, parents, bw, "linear")


def _conv_out(n: int, k: int, stride: int, pad: int, floor: bool) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {n + 2 * pad}")
    if span % stride and not floor:
        raise ShapeError(f"(n + 2*pad - k)/stride = {span}/{stride} is not integral")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, floor: bool = False) -> Tensor:
    """2-D cross-correlation.

    ``x`` is C×H×W or N×C×H×W; ``w`` is C_out×C_in×k×k with k odd. The output
    size must be integral unless ``floor`` is set, in which case the trailing
    rows/columns that do not fill a whole stride are dropped.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"weight must be C_out x C_in x k x k, got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = xd.shape
    o = w.shape[0]
    ho = _conv_out(h, k, stride, pad, floor)
    wo = _conv_out(wd, k, stride, pad, floor)
    dt = np.result_type(xd.dtype, w.dtype)
    # im2col in NHWC order so every copy below moves contiguous channel runs
    xh = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dt)
    xh[:, pad:pad + h, pad:pad + wd, :] = xd.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=dt)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    del xh
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gm = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = None
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, ho, wo, k, k, c)
            dxh = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dt)
            for i in range(k):
                for j in range(k):
                    dxh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxh[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
            if unbatched:
                gx = gx[0]
        return gx, gw

    return apply_op(out, (x, w), bw, "conv2d")


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, dtype=np.float64).astype(x.dtype)
    keep = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(keep), x.shape).astype(x.dtype),)

    return apply_op(out, (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = (x.data.sum(axis=axes, dtype=np.float64) / count).astype(x.dtype)
    keep = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(keep) / count, x.shape).astype(x.dtype),)

    return apply_op(out, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------------------
# channel-wise primitives
# ---------------------------------------------------------------------------

def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply N×C×H×W (or C×H×W) by per-channel factors N×C (or C)."""
    if x.ndim - 2 != s.ndim or x.shape[:s.ndim] != s.shape:
        raise ShapeError(f"cannot scale {x.shape} by channel factors {s.shape}")
    sd = s.data[..., None, None]
    out = x.data * sd

    def bw(g):
        gx = g * sd if x.requires_grad else None
        gs = (g * x.data).sum(axis=(-2, -1), dtype=np.float64).astype(s.dtype) if s.requires_grad else None
        return gx, gs

    return apply_op(out, (x, s), bw, "scale_channels")


def circular_conv1d(v: Tensor, w: Tensor) -> Tensor:
    """Cross-correlate each row of N×C ``v`` with kernel ``w`` (odd length), wrapping at the ends."""
    if v.ndim != 2 or w.ndim != 1:
        raise ShapeError(f"circular_conv1d expects N x C and k, got {v.shape}, {w.shape}")
    k = w.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    r = k // 2
    # out[:, c] = sum_j w[j] * v[:, (c + j - r) mod C]
    shifted = np.stack([np.roll(v.data, -(j - r), axis=1) for j in range(k)], axis=0)
    out = np.tensordot(w.data, shifted, axes=(0, 0)).astype(np.result_type(v.dtype, w.dtype))

    def bw(g):
        gv = None
        if v.requires_grad:
            gv = sum(w.data[j] * np.roll(g, j - r, axis=1) for j in range(k))
        gw = None
        if w.requires_grad:
            gw = np.array([(g * shifted[j]).sum(dtype=np.float64) for j in range(k)], dtype=w.dtype)
        return gv, gw

    return apply_op(out, (v, w), bw, "circular_conv1d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: Optional[tuple] = None,
               training: bool = True, update_stats: bool = True, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of N×C×H×W input.

    In training mode the batch statistics are used and, when ``update_stats``
    is set, ``running`` (a ``(mean, var)`` pair of arrays) is updated in place.
    In eval mode ``running`` supplies the statistics.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: bad shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        if running is not None and update_stats:
            rm, rv = running
            unbiased = var * m / max(m - 1, 1)
            rm *= 1 - momentum
            rm += momentum * mean
            rv *= 1 - momentum
            rv += momentum * unbiased
    else:
        if running is None:
            raise ContractError("eval-mode batch_norm needs running statistics")
        mean, var = running
    inv_std = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)).astype(x.dtype)
    xhat = (x.data - np.asarray(mean, dtype=x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
        gbeta = g.sum(axis=axes, dtype=np.float64).astype(beta.dtype)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=axes, dtype=np.float64)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64)[None, :, None, None]
            gx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return gx.astype(x.dtype), ggamma, gbeta

    return apply_op(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of an N×K tensor."""
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects N x K, got {x.shape}")
    z = x.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out64 = z - lse
    soft = np.exp(out64)
    out = out64.astype(x.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - soft * g64.sum(axis=1, keepdims=True)).astype(x.dtype),)

    return apply_op(out, (x,), bw, "log_softmax")


def nll(logp: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of integer labels ``y`` under rows of ``logp``."""
    y = np.asarray(y, dtype=np.int64)
    if logp.ndim != 2 or y.shape != (logp.shape[0],):
        raise ShapeError(f"nll: logp {logp.shape} vs labels {y.shape}")
    n = logp.shape[0]
    rows = np.arange(n)
    out = np.asarray(-logp.data[rows, y].sum(dtype=np.float64) / n, dtype=logp.dtype)

    def bw(g):
        gl = np.zeros_like(logp.data)
        gl[rows, y] = -float(np.asarray(g).reshape(-1)[0]) / n
        return (gl,)

    return apply_op(out, (logp,), bw, "nll")


def cross_entropy(logits: Tensor, y) -> Tensor:
    return nll(log_softmax(logits), y)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch-mean KL(softmax p || softmax q)."""
    lp = log_softmax(p_logits)
    lq = log_softmax(q_logits)
    per = reduce_sum(mul(exp(lp), sub(lp, lq)))
    return mul(per, 1.0 / p_logits.shape[0])


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class GradTape:
    """Reverse topological ordering of the graph that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.order: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.order.reverse()
        self.leaves = [n for n in self.order if n._leaf]

    def replay(self, seed_grad: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.root): seed_grad}
        for node in self.order:
            g = grads.get(id(node))
            if node._leaf or g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.dtype)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            # release the graph as we go
            node._backward = None
            node._parents = ()
            grads.pop(id(node), None)
        return grads


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None):
    """Differentiate scalar ``loss``.

    Returns ``{leaf: gradient Tensor}`` for every leaf that requires grad and
    is reachable, and accumulates into ``leaf.grad``. If ``wrt`` is given, a
    list of gradients aligned with it is returned instead; unreachable leaves
    get zeros.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    wrt = list(wrt) if wrt is not None else None
    if not loss.requires_grad:
        if wrt is None:
            raise ContractError("loss has no recorded graph")
        return [Tensor(np.zeros_like(t.data)) for t in wrt]
    if not loss._leaf and loss._backward is None:
        raise ContractError("graph already consumed by a previous backward")
    tape = GradTape(loss)
    grads = tape.replay(np.ones_like(loss.data))
    result = {}
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        g = np.ascontiguousarray(g.reshape(leaf.shape), dtype=leaf.dtype)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = Tensor(g, dtype=leaf.dtype)
    if wrt is None:
        return result
    return [result[t] if t in result else Tensor(np.zeros_like(t.data), dtype=t.dtype) for t in wrt]
