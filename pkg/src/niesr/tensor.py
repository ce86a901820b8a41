"""Reverse-mode automatic differentiation on numpy arrays.

Every op builds a node holding its parents and a closure mapping the output
gradient to per-parent gradients.  ``backward`` collects the nodes reachable
from a scalar loss and sweeps them in reverse creation order, so each node is
visited exactly once after all of its consumers.

Broadcasting is deliberately narrow: binary operands must have the same rank
and each dimension must match or be 1 (0-d scalars broadcast against
anything).  This keeps rank mistakes loud.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "track_access",
    "set_default_dtype",
    "get_default_dtype",
    "backward",
    "check_gradient",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "square",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "split",
    "stack",
    "softmax",
    "log_softmax",
    "conv1d",
    "dropout",
    "reverse_gradient",
    "lstm_cell",
    "lstm_sequence",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_DTYPE = np.float64
_GRAD_ENABLED = True
_ACCESS_LOGS: list[set[str]] = []
_SEQ = itertools.count()


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for backward."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def track_access():
    """Collect the names of every Parameter read by an op inside the block."""
    names: set[str] = set()
    _ACCESS_LOGS.append(names)
    try:
        yield names
    finally:
        _ACCESS_LOGS.remove(names)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _ACCESS_LOGS:
        for p in parents:
            if isinstance(p, Parameter):
                for log_ in _ACCESS_LOGS:
                    log_.add(p.name)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) != len(sb) or any(x != y and x != 1 and y != 1 for x, y in zip(sa, sb)):
        raise ShapeError(f"{op}: cannot broadcast shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls until the leaves' ``zero_grad`` is used.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    # creation order is a topological order of the graph
    nodes.sort(key=lambda n: n._seq, reverse=True)

    buffers: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = buffers.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in buffers:
                buffers[key] = buffers[key] + pg
            else:
                buffers[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(ad)
    return _make(y, "log", (a,), lambda g: (g / ad,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _make(np.array(a.data[idx]), "getitem", (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty list")
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(i != ax and x != y for i, (x, y) in enumerate(zip(p.shape, parts[0].shape))):
            raise ShapeError(f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([p.data for p in parts], axis=ax), "concat", parts, bw)


def split(t: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of concat: cut ``t`` along ``axis`` into pieces of ``sizes``."""
    ax = axis % t.ndim
    if int(np.sum(sizes)) != t.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not add up to {t.shape[ax]}")
    out = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * t.ndim
        idx[ax] = slice(start, start + s)
        out.append(_getitem(t, tuple(idx)))
        start += s
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    ax = axis % (parts[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts], axis=ax), "stack", parts, bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def _check_mask(mask, shape, op):
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape:
        m = np.broadcast_to(m, shape)
    if not m.any(axis=-1).all():
        raise ValueError(f"{op}: a row has every entry masked")
    return m


def softmax(v, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False are exactly 0."""
    v = _as_tensor(v)
    m = _check_mask(mask, v.shape, "softmax")
    x = v.data
    if m is not None:
        x = np.where(m, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (v,), bw)


def log_softmax(v, mask=None) -> Tensor:
    v = _as_tensor(v)
    m = _check_mask(mask, v.shape, "log_softmax")
    x = v.data
    if m is not None:
        x = np.where(m, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    if m is not None:
        # masked slots carry no value; park them at 0 so the guard stays quiet
        y = np.where(m, y, 0.0)

    def bw(g):
        if m is not None:
            g = np.where(m, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, "log_softmax", (v,), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv1d(signal, kernels) -> Tensor:
    """Same-length cross-correlation of ``signal[..., T]`` with ``kernels[K, C]``.

    Returns ``[..., T, C]``.  An even ``K`` gets one zero tap appended so the
    window is centred.
    """
    signal, kernels = _as_tensor(signal), _as_tensor(kernels)
    if signal.ndim == 0 or signal.shape[-1] == 0:
        raise ShapeError("conv1d: empty signal")
    if kernels.ndim != 2:
        raise ShapeError(f"conv1d: kernels must be [K, C], got {kernels.shape}")
    K, C = kernels.shape
    T = signal.shape[-1]
    F = kernels.data
    if K % 2 == 0:
        F = np.concatenate([F, np.zeros((1, C), dtype=F.dtype)], axis=0)
    Kp = F.shape[0]
    half = Kp // 2
    pad = [(0, 0)] * (signal.ndim - 1) + [(half, half)]
    xp = np.pad(signal.data, pad)
    windows = np.lib.stride_tricks.sliding_window_view(xp, Kp, axis=-1)  # [..., T, Kp]
    out = windows @ F

    def bw(g):
        gF = windows.reshape(-1, Kp).T @ g.reshape(-1, C)
        gw = g @ F.T  # [..., T, Kp]
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(Kp):
            gxp[..., k : k + T] += gw[..., k]
        return gxp[..., half : half + T], gF[:K]

    return _make(out, "conv1d", (signal, kernels), bw)


# ---------------------------------------------------------------------------
# stochastic / structural
# ---------------------------------------------------------------------------


def dropout(t, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``; eval is identity."""
    t = _as_tensor(t)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(t.shape) >= rate).astype(t.data.dtype) / (1.0 - rate)
    return _make(t.data * keep, "dropout", (t,), lambda g: (g * keep,))


def reverse_gradient(t, scale: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies gradients by ``-scale``."""
    t = _as_tensor(t)
    return _make(t.data.copy(), "reverse_gradient", (t,), lambda g: (-scale * g,))


# ---------------------------------------------------------------------------
# fused recurrent kernels
# ---------------------------------------------------------------------------


def _lstm_gates(z: np.ndarray, H: int):
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = _sigmoid(z[..., 3 * H :])
    return i, f, g, o


def lstm_cell(x, h, c, w_ih, w_hh, b) -> Tensor:
    """One LSTM step with gate order (input, forget, cell, output).

    Returns ``concat([h_new, c_new], -1)``; the caller splits it.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    H = h.shape[-1]
    if w_ih.shape != (4 * H, x.shape[-1]) or w_hh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm_cell: input {x.shape}, state {h.shape} do not match weights "
            f"{w_ih.shape}, {w_hh.shape}, {b.shape}"
        )
    if c.shape != h.shape:
        raise ShapeError(f"lstm_cell: h {h.shape} and c {c.shape} differ")
    xd, hd, cd = x.data, h.data, c.data
    z = xd @ w_ih.data.T + hd @ w_hh.data.T + b.data
    i, f, g, o = _lstm_gates(z, H)
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw(grad):
        dh, dc = grad[..., :H], grad[..., H:]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [dc * g * i * (1.0 - i), dc * cd * f * (1.0 - f), dc * i * (1.0 - g * g), do * o * (1.0 - o)],
            axis=-1,
        )
        dz2 = dz.reshape(-1, 4 * H)
        return (
            dz @ w_ih.data,
            dz @ w_hh.data,
            dc * f,
            dz2.T @ xd.reshape(-1, xd.shape[-1]),
            dz2.T @ hd.reshape(-1, H),
            dz2.sum(axis=0),
        )

    return _make(np.concatenate([h_new, c_new], axis=-1), "lstm_cell", (x, h, c, w_ih, w_hh, b), bw)


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


def lstm_sequence(x, mask, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x[B, T, I]`` from zero state; returns ``[B, T, H]``.

    ``mask[B, T]`` marks valid frames, which must form a prefix of each row.
    With ``reverse`` each row is read from its last valid frame back to its
    first.  Outputs at padded frames are exactly zero, so those frames pass
    no gradient.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence expects [B, T, I], got {x.shape}")
    B, T, I = x.shape
    H = w_hh.shape[-1]
    if w_ih.shape != (4 * H, I) or w_hh.shape != (4 * H, H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm_sequence: input {x.shape} does not match weights {w_ih.shape}, {w_hh.shape}")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (B, T):
        raise ShapeError(f"lstm_sequence: mask {m.shape} vs input {x.shape}")
    lengths = m.sum(axis=1)
    if reverse:
        ridx = _reverse_index(lengths, T)
        rows = np.arange(B)[:, None]
        xd = x.data[rows, ridx]
    else:
        xd = x.data
    mf = m.astype(xd.dtype)[..., None]
    Wih, Whh, bd = w_ih.data, w_hh.data, b.data

    zx = xd @ Wih.T + bd  # [B, T, 4H]
    hs = np.zeros((B, T + 1, H), dtype=xd.dtype)
    cs = np.zeros((B, T + 1, H), dtype=xd.dtype)
    gates = np.empty((B, T, 4 * H), dtype=xd.dtype)
    for t in range(T):
        z = zx[:, t] + hs[:, t] @ Whh.T
        i, f, g, o = _lstm_gates(z, H)
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t, :H], gates[:, t, H : 2 * H], gates[:, t, 2 * H : 3 * H], gates[:, t, 3 * H :] = i, f, g, o
    out = hs[:, 1:] * mf
    if reverse:
        out = out[rows, ridx]

    def bw(grad):
        if reverse:
            grad = grad[rows, ridx]
        grad = grad * mf
        dZ = np.empty_like(gates)
        dh_next = np.zeros((B, H), dtype=grad.dtype)
        dc_next = np.zeros((B, H), dtype=grad.dtype)
        for t in range(T - 1, -1, -1):
            i, f, g, o = gates[:, t, :H], gates[:, t, H : 2 * H], gates[:, t, 2 * H : 3 * H], gates[:, t, 3 * H :]
            tc = np.tanh(cs[:, t + 1])
            dh = grad[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dZ[:, t, :H] = dc * g * i * (1.0 - i)
            dZ[:, t, H : 2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dZ[:, t, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dZ[:, t, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dZ[:, t] @ Whh
        dZ2 = dZ.reshape(-1, 4 * H)
        dx = dZ @ Wih
        if reverse:
            dx = dx[rows, ridx]
        return (
            dx,
            dZ2.T @ xd.reshape(-1, I),
            dZ2.T @ hs[:, :-1].reshape(-1, H),
            dZ2.sum(axis=0),
        )

    return _make(out, "lstm_sequence", (x, w_ih, w_hh, b), bw)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def check_gradient(
    f: Callable[[], Tensor],
    point: Tensor | Iterable[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-2,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Compare tape gradients against central finite differences.

    ``f`` is re-evaluated with no arguments after each in-place perturbation
    of the tensors in ``point``, so it should close over them.  Returns the
    largest ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``coords`` optionally restricts the check to flat indices per tensor
    (keyed by position in ``point``).
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    try:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("check_gradient: f is not finite at the point")
        backward(loss)
        worst = 0.0
        for k, p in enumerate(points):
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            idx = coords.get(k, np.arange(flat.size)) if coords is not None else np.arange(flat.size)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + eps
                with no_grad():
                    fp = float(f().data.sum())
                flat[j] = orig - eps
                with no_grad():
                    fm = float(f().data.sum())
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("check_gradient: f is not finite near the point")
                num = (fp - fm) / (2.0 * eps)
                ana = float(analytic.reshape(-1)[j])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
        return worst
    finally:
        for p, s in zip(points, saved):
            p.requires_grad = s
            p.grad = None
