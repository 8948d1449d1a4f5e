"""Minimal reverse-mode gradients over dense numpy arrays.

Tensor values are stored as float32. Every op computes in float64 and rounds
its output back to float32, except scalar (0-d) results such as losses, which
stay float64. Gradients are accumulated in float64.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
ACC = np.float64

_state = {"grad_enabled": True, "fast": False, "kinks": None}


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_fast_mode(flag: bool) -> None:
    """Fast mode runs matmuls in float32 BLAS instead of float64 accumulation."""
    _state["fast"] = bool(flag)


def fast_mode() -> bool:
    return _state["fast"]


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.astype(ACC)
        elif arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g) -> None:
        g = np.asarray(g, dtype=ACC)
        if g.shape != self.data.shape:
            g = np.broadcast_to(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=ACC, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data, dtype=ACC)
        order = _topo_order(self)
        for node in order:
            node._grad_buf = None
        self._grad_buf = np.asarray(grad, dtype=ACC)
        for node in reversed(order):
            g = node._grad_buf
            node._grad_buf = None
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
            else:
                node._backward(g)

    def _send(self, g) -> None:
        # internal: route an upstream gradient to this node during backward
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=ACC)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        buf = getattr(self, "_grad_buf", None)
        self._grad_buf = g.copy() if buf is None else buf + g

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a forward value computed from ``parents``.

    ``backward(g)`` receives the upstream gradient and must call
    ``parent._send(...)`` for each parent. Nothing is recorded when gradients
    are disabled or no parent requires them.
    """
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(value)
    return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(ACC, copy=False)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        a._send(g)
        b._send(g)

    return make_op(_f64(a) + _f64(b), (a, b), backward)


def add_bias(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} are incompatible")
    return add(x, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        a._send(g)
        b._send(-g)

    return make_op(_f64(a) - _f64(b), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = _f64(a), _f64(b)

    def backward(g):
        a._send(g * bv)
        b._send(g * av)

    return make_op(av * bv, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = _f64(a), _f64(b)

    def backward(g):
        a._send(g / bv)
        b._send(-g * av / (bv * bv))

    return make_op(av / bv, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_op(_f64(x) * c, (x,), lambda g: x._send(g * c))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(_f64(x))
    return make_op(out, (x,), lambda g: x._send(g * out))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = _f64(x)
    return make_op(np.log(xv), (x,), lambda g: x._send(g / xv))


def _log_kink(mask: np.ndarray) -> None:
    if _state["kinks"] is not None:
        _state["kinks"].append(mask)


@contextlib.contextmanager
def _record_kinks():
    """Collect the sign masks of every (leaky) ReLU evaluated inside the block."""
    saved = _state["kinks"]
    log: list = []
    _state["kinks"] = log
    try:
        yield log
    finally:
        _state["kinks"] = saved


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def relu(x) -> Tensor:
    x = as_tensor(x)
    xv = _f64(x)
    mask = xv > 0  # subgradient at 0 is 0
    _log_kink(mask)
    return make_op(np.where(mask, xv, 0.0), (x,), lambda g: x._send(g * mask))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    xv = _f64(x)
    factor = np.where(xv > 0, 1.0, slope)
    _log_kink(xv > 0)
    return make_op(xv * factor, (x,), lambda g: x._send(g * factor))


# linear algebra and shape ops

def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D operands or stacks of matrices with numpy batching."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    if _state["fast"]:
        av, bv = a.data, b.data
    else:
        av, bv = _f64(a), _f64(b)
    out = np.matmul(av, bv)

    def backward(g):
        if a.requires_grad:
            a._send(np.matmul(g, np.swapaxes(bv, -1, -2).astype(ACC, copy=False)))
        if b.requires_grad:
            b._send(np.matmul(np.swapaxes(av, -1, -2).astype(ACC, copy=False), g))

    return make_op(out, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_op(out, (x,), lambda g: x._send(g.reshape(x.shape)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: x._send(np.transpose(g, inverse)))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros(x.shape, dtype=ACC)
        np.add.at(full, index, g)
        x._send(full)

    return make_op(out, (x,), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return make_op(np.array(out), (x,), lambda g: x._send(g))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            t._send(np.take(g, np.arange(lo, hi), axis=ax))

    return make_op(np.concatenate([t.data for t in ts], axis=ax), ts, backward)


# reductions

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = _f64(x).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._send(np.broadcast_to(g, x.shape))

    return make_op(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def mean_rows(x) -> Tensor:
    """Column-wise mean over the rows of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"mean_rows: expected a 2-D tensor, got {x.shape}")
    return mean(x, axis=0)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    xv = _f64(x)
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._send(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return make_op(out, (x,), backward)


# losses

def mse_loss(x, y) -> Tensor:
    """Mean of squared differences over every element."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"mse_loss: shapes {x.shape} and {y.shape} differ")
    diff = _f64(x) - _f64(y)
    n = diff.size

    def backward(g):
        x._send(g * 2.0 * diff / n)
        y._send(-g * 2.0 * diff / n)

    return make_op(np.mean(diff * diff), (x, y), backward)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy_loss: labels outside [0, {logits.shape[1]})")
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("cross_entropy_loss: empty batch")
    z = _f64(logits)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - shifted[rows, labels])

    def backward(g):
        probs = np.exp(shifted - logsum[:, None])
        probs[rows, labels] -= 1.0
        logits._send(g * probs / n)

    return make_op(loss, (logits,), backward)


# verification

@dataclass
class GradCheck:
    error: float
    checked: int
    skipped: int


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               max_coords: int = 200, floor: float = 1e-3, seed: int = 0) -> float:
    """Relative error between backward gradients and central differences.

    ``f`` must be deterministic and return a scalar tensor built from
    ``params``. Up to ``max_coords`` coordinates are sampled across all
    parameters. The error is normwise over the sampled coordinates:
    ``max|a - n| / max(max|a|, max|n|, floor)``. Per-coordinate ratios are
    not used because float32 storage puts round-off of order
    ``|f| * 2**-24 / eps`` on every difference quotient, which swamps
    coordinates whose true gradient is ~0.

    A probe whose +-eps step flips the sign pattern of any (leaky) ReLU
    straddles a kink; its difference quotient estimates no derivative, so
    that coordinate is left out. See ``grad_check_report`` for the counts.
    """
    return grad_check_report(f, params, eps, max_coords, floor, seed).error


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
                      max_coords: int = 200, floor: float = 1e-3, seed: int = 0) -> GradCheck:
    for p in params:
        p.zero_grad()
    with _record_kinks() as base_pattern:
        out = f()
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    a_vals, n_vals, skipped = [], [], 0
    for i, j in coords:
        p = params[i]
        flat = p.data.reshape(-1)
        orig = flat[j].copy()
        hi = p.data.dtype.type(float(orig) + eps)
        lo = p.data.dtype.type(float(orig) - eps)
        flat[j] = hi
        with no_grad(), _record_kinks() as hi_pattern:
            f_hi = float(f().data)
        flat[j] = lo
        with no_grad(), _record_kinks() as lo_pattern:
            f_lo = float(f().data)
        flat[j] = orig
        if not (_same_pattern(hi_pattern, base_pattern) and _same_pattern(lo_pattern, base_pattern)):
            skipped += 1
            continue
        # divide by the step actually taken after float32 rounding
        n_vals.append((f_hi - f_lo) / (float(hi) - float(lo)))
        a_vals.append(float(analytic[i].reshape(-1)[j]))
    if not a_vals:
        return GradCheck(0.0, 0, skipped)
    a_arr, n_arr = np.array(a_vals), np.array(n_vals)
    scale_ = max(np.abs(a_arr).max(), np.abs(n_arr).max(), floor)
    return GradCheck(float(np.abs(a_arr - n_arr).max() / scale_), len(a_vals), skipped)
