"""Dense numpy-backed arrays with tape-based reverse-mode differentiation.

Only the operations the grounding model and its losses need are provided.
Each op records a node on the active :class:`Tape` (when any input requires
grad); :func:`grad` replays the tape in reverse execution order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


CHECK_FINITE = True

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _corrupted() -> set:
    s = getattr(_state, "corrupt", None)
    if s is None:
        s = _state.corrupt = set()
    return s


@contextlib.contextmanager
def corrupt(*op_names: str):
    """Debug hook: scale the backward output of the named ops by 1.5."""
    s = _corrupted()
    added = [n for n in op_names if n not in s]
    s.update(added)
    try:
        yield
    finally:
        s.difference_update(added)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed differentiable ops."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> dict:
        grads = {id(loss): np.ones_like(loss.data) if seed is None else seed}
        corrupted = _corrupted()
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            scale = 1.5 if node.op in corrupted else None
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if scale is not None:
                    ig = ig * scale
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        # leaves are never node outputs, so their accumulated grads remain
        return grads


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return np.float32


def _record(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.nodes.append(_Node(op, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b):
    dt = _dtype_of(a, b)
    return as_tensor(a, dt), as_tensor(b, dt)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _record("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _record("relu", np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # stable on both tails
    out = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))),
                   np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad)))).astype(ad.dtype)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record("clamp", np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return _record("maximum", np.maximum(ad, bd), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)))


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return _record("minimum", np.minimum(ad, bd), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, ad.shape), _unbroadcast(g * ~pick_a, bd.shape)))


# ---------------------------------------------------------------- reductions / shape

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _record("transpose", np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dt = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", a.data[idx], (a,), back)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices)
    shape, dt = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dt)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", np.take(a.data, indices, axis=axis), (a,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x, _dtype_of(*xs)) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x, _dtype_of(*xs)) for x in xs]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", np.stack([x.data for x in xs], axis=axis), tuple(xs), back)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", ad @ bd, (a, b), back)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax. ``mask`` (True = keep) forces exact zeros elsewhere."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not np.all(mask.any(axis=axis)):
            raise InvalidMaskError("softmax: a slice is fully masked")
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), back)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply ``gain * x + bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bias.data
    n = xd.shape[-1]
    red = tuple(range(xd.ndim - 1))

    def back(g):
        gx_hat = g * gd
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", out, (x, gain, bias), back)


def attention(queries: Tensor, keys: Tensor, values: Tensor, heads: int,
              mask: np.ndarray | None = None):
    """Multi-head scaled dot-product attention.

    Inputs are ``[..., Tq, d]`` / ``[..., Tk, d]``. ``mask`` is boolean,
    broadcastable to ``[..., Tq, Tk]`` with True marking allowed keys.
    Returns the merged output ``[..., Tq, d]`` and weights ``[..., heads, Tq, Tk]``.
    Projections are the caller's business.
    """
    d = queries.shape[-1]
    if d % heads:
        raise ShapeError(f"attention: d={d} not divisible by heads={heads}")
    dh = d // heads
    lead = queries.shape[:-2]
    tq, tk = queries.shape[-2], keys.shape[-2]

    def split(x, t):
        x = reshape(x, x.shape[:-1] + (heads, dh))
        return swapaxes(x, -2, -3)  # [..., heads, t, dh]

    q, k, v = split(queries, tq), split(keys, tk), split(values, tk)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    weights = softmax(scores, axis=-1, mask=mask)
    out = matmul(weights, v)  # [..., heads, tq, dh]
    out = reshape(swapaxes(out, -2, -3), lead + (tq, d))
    return out, weights


# ---------------------------------------------------------------- gradients

def grad(loss: Tensor, params: Sequence[Tensor], tape: Tape | None = None) -> list:
    """d(loss)/d(param) for each param; zeros for params not on the path."""
    if loss.data.size != 1:
        raise ContractError(f"grad: loss must be scalar, got shape {loss.shape}")
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("grad: no active tape")
    grads = tape.backward(loss)
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]


@dataclass
class FDReport:
    """Outcome of a finite-difference gradient check."""

    errors: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list:
        return [f"{name:<40s} {err:.3e} {'PASS' if err < self.tol else 'FAIL'}"
                for name, err in self.errors.items()]


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      tol: float = 1e-5, names: Sequence[str] | None = None,
                      max_entries: int | None = None, rng=None) -> FDReport:
    """Compare tape gradients of scalar ``f()`` with central differences.

    The error for each parameter is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|)`` over the checked entries. A
    parameter whose gradients on both sides sit below the rounding noise
    of the central difference (``1e3 * eps * max(|f|, 1) / h``) counts as
    structurally zero and scores 0. ``max_entries`` subsamples coordinates
    of large parameters.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    with Tape() as tape:
        loss = f()
    analytic = grad(loss, params, tape)
    noise = 1e3 * np.finfo(np.float64).eps * max(abs(float(loss.data)), 1.0) / h
    errors = {}
    for name, p, ga in zip(names, params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        ana = ga.reshape(-1)[idx]
        scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0))
        if scale < noise:
            errors[name] = 0.0
            continue
        errors[name] = float(np.max(np.abs(ana - num), initial=0.0) / scale)
    return FDReport(errors, tol)


def parameters_to(params: Iterable[Tensor], dtype) -> list:
    return [Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=p.name) for p in params]
