"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable quantity is a :class:`Node` wrapping an ``ndarray``.
Ops record their parents and a closure that maps the upstream gradient
to one gradient per parent; :func:`backward` walks the graph in reverse
topological order and accumulates into ``Node.grad``.

The op set is deliberately small: what a hierarchical GRU/attention
encoder, a few MLP heads and cross-entropy / KL objectives need.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12

_GRAD_ENABLED = True
# Flipped only by fault-injection tests of the gradient checker.
_GRL_SIGN = -1.0


class ShapeError(ValueError):
    """Inputs to an op have incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"op '{op}': incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


class NumericError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class NonDeterministicError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_grl_sign_bug():
    """Make grad_reverse pass ``+eta * g`` instead of ``-eta * g``."""
    global _GRL_SIGN
    prev = _GRL_SIGN
    _GRL_SIGN = 1.0
    try:
        yield
    finally:
        _GRL_SIGN = prev


class Node:
    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "op")
    # make ndarray <op> Node dispatch to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None, requires_grad=False, op="leaf"):
        self.value = value
        self._grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def zero_grad(self) -> None:
        self._grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, dtype=np.float64) -> Node:
    """Leaf that receives gradients."""
    return Node(np.array(value, dtype=dtype), requires_grad=True)


def const(value, dtype=None) -> Node:
    if isinstance(value, Node):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else np.float64)
    return Node(arr)


def detach(x: Node) -> Node:
    return Node(x.value.copy())


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else np.float64
    return Node(np.asarray(x, dtype=dtype))


def _make(op: str, value: np.ndarray, parents: Sequence[Node], backward) -> Node:
    # a single reduction is cheaper than isfinite(); recheck only if it overflows
    if not np.isfinite(value.sum()) and not np.all(np.isfinite(value)):
        raise NumericError(f"op '{op}' produced non-finite values")
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Node(value, op=op)
    return Node(value, tuple(parents), backward, True, op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Node:
    a, b = _as_node(a, b if isinstance(b, Node) else None), _as_node(b, a if isinstance(a, Node) else None)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a, b if isinstance(b, Node) else None), _as_node(b, a if isinstance(a, Node) else None)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = _as_node(a, b if isinstance(b, Node) else None), _as_node(b, a if isinstance(a, Node) else None)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` for 2-D ``a``; ``b`` may be a matrix or a vector."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    out = av @ bv
    if bv.ndim == 1:
        return _make("matmul", out, (a, b),
                     lambda g: (np.outer(g, bv), av.T @ g))
    return _make("matmul", out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Node) -> Node:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    y = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        y = np.exp(x.value)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Node) -> Node:
    """Natural log with the argument clamped below at ``LOG_FLOOR``."""
    v = x.value
    clamped = np.maximum(v, LOG_FLOOR)
    live = v > LOG_FLOOR
    return _make("log", np.log(clamped), (x,),
                 lambda g: (np.where(live, g / clamped, 0.0),))


def maximum(x: Node, floor) -> Node:
    """Elementwise ``max(x, floor)``; ties send the gradient to ``x``."""
    f = _as_node(floor, x)
    _check_broadcast("maximum", x, f)
    xv, fv = x.value, f.value
    pick = xv >= fv
    return _make("maximum", np.maximum(xv, fv), (x, f),
                 lambda g: (_unbroadcast(np.where(pick, g, 0.0), xv.shape),
                            _unbroadcast(np.where(pick, 0.0, g), fv.shape)))


def where(mask: np.ndarray, a: Node, b: Node) -> Node:
    """Select ``a`` where the (constant) mask is true, else ``b``."""
    shape = _check_broadcast("where", a, b)
    try:
        np.broadcast_shapes(shape, np.shape(mask))
    except ValueError:
        raise ShapeError("where", np.shape(mask), a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _make("where", np.where(mask, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                            _unbroadcast(np.where(mask, 0.0, g), sb)))


# --- reductions and softmax -------------------------------------------------


def sum(x: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(x.value.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    if n == 0:
        raise ShapeError("mean", x.shape, detail="empty reduction")
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Node) -> Node:
    """Softmax over the last axis."""
    v = x.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), back)


def masked_softmax(x: Node, mask: np.ndarray) -> Node:
    """Softmax over the last axis restricted to ``mask``; masked slots are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("masked_softmax", x.shape, mask.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no unmasked positions")
    v = x.value
    shifted = np.where(mask, v, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("masked_softmax", y, (x,), back)


# --- structural ops ---------------------------------------------------------


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Node, axes=None) -> Node:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.value, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def index(x: Node, key) -> Node:
    """Basic (view) indexing, e.g. ``x[t]`` or ``x[:, :h]``."""
    shape, dtype = x.shape, x.value.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _make("index", x.value[key], (x,), back)


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    xs = list(xs)
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Node], axis: int = 0) -> Node:
    xs = list(xs)
    try:
        out = np.stack([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[x.shape for x in xs]) from None
    n = len(xs)
    return _make("stack", out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def take_rows(table: Node, ids) -> Node:
    """Gather rows of a 2-D table: ``out[...] = table[ids[...]]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("take_rows", table.shape, ids.shape)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"take_rows: id out of range for table with {n} rows")
    shape, dtype = table.shape, table.value.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make("take_rows", table.value[ids], (table,), back)


def scatter_rows(x: Node, rows, n: int) -> Node:
    """Place the rows of ``x`` at positions ``rows`` of an ``n``-row zero array."""
    rows = np.asarray(rows, dtype=np.int64)
    if x.value.ndim < 1 or x.shape[0] != rows.size:
        raise ShapeError("scatter_rows", x.shape, rows.shape)
    out = np.zeros((n,) + x.shape[1:], dtype=x.value.dtype)
    out[rows] = x.value
    return _make("scatter_rows", out, (x,), lambda g: (g[rows],))


def gru_scan(proj: Node, w_hidden: Node, mask, reverse: bool = False) -> Node:
    """Run a GRU over precomputed input projections.

    ``proj`` is ``(T, N, 3H)``: the input-to-gate terms (bias included) for
    the update, reset and candidate gates in that order. ``w_hidden`` is
    ``(H, 3H)``, the hidden-to-gate weights in the same order. Per step::

        z, r = sigmoid(proj_zr + h @ w_zr)
        n = tanh(proj_n + (r * h) @ w_n)
        h' = n + z * (h - n)

    and where ``mask[:, t]`` is false the state is carried through. Returns
    the ``(N, T, H)`` states. The backward pass is hand-written BPTT.
    """
    xp, wh = proj.value, w_hidden.value
    steps, n_seq, h3 = xp.shape
    hid = h3 // 3
    if h3 != 3 * hid or wh.shape != (hid, h3):
        raise ShapeError("gru_scan", xp.shape, wh.shape)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n_seq, steps):
        raise ShapeError("gru_scan", xp.shape, m.shape, detail="mask must be (N, T)")
    mf = m.astype(xp.dtype)
    w_zr, w_n = wh[:, :2 * hid], wh[:, 2 * hid:]
    order = list(range(steps - 1, -1, -1)) if reverse else list(range(steps))
    h = np.zeros((n_seq, hid), dtype=xp.dtype)
    out = np.empty((steps, n_seq, hid), dtype=xp.dtype)
    cache = {}
    for t in order:
        zr = xp[t, :, :2 * hid] + h @ w_zr
        zr = 1.0 / (1.0 + np.exp(-np.clip(zr, -500, 500)))
        z, r = zr[:, :hid], zr[:, hid:]
        rh = r * h
        cand = np.tanh(xp[t, :, 2 * hid:] + rh @ w_n)
        new = cand + z * (h - cand)
        mt = mf[:, t:t + 1]
        cache[t] = (h, z, r, rh, cand, mt)
        h = mt * new + (1.0 - mt) * h
        out[t] = h

    def back(g):
        g = np.transpose(g, (1, 0, 2))
        d_xp = np.zeros_like(xp)
        d_wzr = np.zeros_like(w_zr)
        d_wn = np.zeros_like(w_n)
        carry = np.zeros((n_seq, hid), dtype=xp.dtype)
        for t in reversed(order):
            h_prev, z, r, rh, cand, mt = cache[t]
            dh = g[t] + carry
            d_new = mt * dh
            d_prev = (1.0 - mt) * dh + d_new * z
            d_an = d_new * (1.0 - z) * (1.0 - cand * cand)
            d_z = d_new * (h_prev - cand)
            d_wn += rh.T @ d_an
            d_rh = d_an @ w_n.T
            d_prev += d_rh * r
            d_azr = np.concatenate([d_z * z * (1.0 - z), d_rh * h_prev * r * (1.0 - r)], axis=1)
            d_wzr += h_prev.T @ d_azr
            d_prev += d_azr @ w_zr.T
            d_xp[t, :, :2 * hid] = d_azr
            d_xp[t, :, 2 * hid:] = d_an
            carry = d_prev
        return d_xp, np.concatenate([d_wzr, d_wn], axis=1)

    return _make("gru_scan", np.ascontiguousarray(np.transpose(out, (1, 0, 2))), (proj, w_hidden), back)


def grad_reverse(x: Node, eta: float) -> Node:
    """Identity forward; multiplies the gradient by ``-eta`` on the way back."""
    if eta < 0:
        raise ValueError(f"grad_reverse: eta must be >= 0, got {eta}")
    scale = _GRL_SIGN * eta
    return _make("grad_reverse", x.value.copy(), (x,), lambda g: (scale * g,))


# --- backward ---------------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into every reachable node that requires grad."""
    if root.value.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._grad = g if node._grad is None else node._grad + g
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


# --- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Node], state: AdamState) -> None:
    """One bias-corrected Adam update.

    Parameters that received no gradient since the last ``zero_grads`` are
    left untouched (their moments are not decayed either). Gradients are not
    cleared here.
    """
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("adam_step", (len(params),), (len(state.m),),
                         detail="parameter count differs from optimiser state")
    for p, m in zip(params, state.m):
        if m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, m.shape)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if not p.has_grad:
            continue
        g = p._grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- finite-difference checking ---------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(
    build: Callable[[], Node],
    params: dict[str, Node],
    tolerance: float = 1e-4,
    step: float = 1e-6,
    reference: Callable[[], float] | dict[str, Callable[[], float]] | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``build`` must rebuild the scalar graph from the current values of
    ``params`` each call. ``reference`` optionally supplies the scalar whose
    numeric derivative is the intended gradient (e.g. when a gradient
    reversal makes the analytic gradient differ from d(forward)/d(param));
    a dict maps parameter names to their own reference.
    """
    first = build()
    second = build()
    if not np.array_equal(first.value, second.value):
        raise NonDeterministicError("builder returned different values on repeated evaluation")
    for p in params.values():
        p.zero_grad()
    backward(second)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def value_fn(name):
        if reference is None:
            return lambda: float(build().value)
        if callable(reference):
            return reference
        return reference.get(name, lambda: float(build().value))

    errors = {}
    with no_grad():
        for name, p in params.items():
            f = value_fn(name)
            flat = p.value.reshape(-1)
            numeric = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f()
                flat[i] = orig - step
                down = f()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            errors[name] = relative_error(analytic[name].reshape(-1), numeric)
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(errors, tolerance)
