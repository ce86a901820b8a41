"""Recurrent and structural layers built on :mod:`niesr.tensor`.

Parameters live on lightweight :class:`Module` objects.  Every weight matrix
is drawn from ``uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))``, biases start at
zero except the LSTM forget gate, which starts at 1.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Container whose Parameters (direct or nested) get dotted names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ W.T + b`` with ``W`` of shape ``[out, in]``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = Parameter(uniform_init(rng, (out_dim, in_dim), in_dim))
        self.b = Parameter(np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(self, x)


def linear(params: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"linear: input {x.shape} does not match weight {params.w.shape}")
    if x.ndim == 1:
        x = x.reshape(1, -1)
        return (x @ T.transpose(params.w) + params.b.reshape(1, -1)).reshape(-1)
    lead = (1,) * (x.ndim - 1)
    return x @ T.transpose(params.w) + params.b.reshape(lead + (params.out_dim,))


class LSTMCell(Module):
    """Gate order (input, forget, cell, output) in the stacked weights."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.w_ih = Parameter(uniform_init(rng, (4 * hidden, in_dim), in_dim))
        self.w_hh = Parameter(uniform_init(rng, (4 * hidden, hidden), hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        self.b = Parameter(b)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def in_dim(self) -> int:
        return self.w_ih.shape[1]


def lstm_cell_step(params: LSTMCell, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    hc = T.lstm_cell(x, h_prev, c_prev, params.w_ih, params.w_hh, params.b)
    H = params.hidden
    h, c = T.split(hc, [H, H], axis=-1)
    return h, c


class BLSTM(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.fwd = LSTMCell(in_dim, hidden, rng)
        self.bwd = LSTMCell(in_dim, hidden, rng)

    @property
    def out_dim(self) -> int:
        return 2 * self.fwd.hidden

    def __call__(self, seq: Tensor, mask: np.ndarray) -> Tensor:
        return blstm_forward(self.fwd, self.bwd, seq, mask)


def blstm_forward(fwd: LSTMCell, bwd: LSTMCell, seq: Tensor, mask) -> Tensor:
    """Bidirectional LSTM over ``seq[B, T, I]`` (or ``[T, I]``).

    ``mask`` is a ``[B, T]`` validity mask, or an integer length for an
    unbatched sequence.  Output is ``[..., T, 2H]`` with zeros at padding.
    """
    unbatched = seq.ndim == 2
    if unbatched:
        length = int(mask)
        if length <= 0:
            raise ValueError("blstm_forward: zero-length sequence")
        if length > seq.shape[0]:
            raise ValueError(f"blstm_forward: length {length} exceeds {seq.shape[0]} frames")
        mask = (np.arange(seq.shape[0]) < length)[None, :]
        seq = seq.reshape(1, *seq.shape)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("blstm_forward: zero-length sequence in batch")
    f = T.lstm_sequence(seq, mask, fwd.w_ih, fwd.w_hh, fwd.b)
    b = T.lstm_sequence(seq, mask, bwd.w_ih, bwd.w_hh, bwd.b, reverse=True)
    out = T.concat([f, b], axis=-1)
    if unbatched:
        out = out.reshape(out.shape[1:])
    return out


class Subsample(Linear):
    """Projects each pair of consecutive frames to one frame."""

    def __init__(self, frame_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__(2 * frame_dim, out_dim, rng)


def subsample(params: Subsample, seq: Tensor) -> Tensor:
    """``[..., T, D] -> [..., ceil(T/2), D']``; odd ``T`` gets a zero frame appended."""
    if seq.shape[-2] == 0:
        raise ValueError("subsample: empty sequence")
    D = seq.shape[-1]
    if 2 * D != params.in_dim:
        raise ShapeError(f"subsample: frame dim {D} does not match projection {params.w.shape}")
    Tn = seq.shape[-2]
    if Tn % 2:
        zero = Tensor(np.zeros(seq.shape[:-2] + (1, D)))
        seq = T.concat([seq, zero], axis=-2)
        Tn += 1
    pairs = seq.reshape(seq.shape[:-2] + (Tn // 2, 2 * D))
    return linear(params, pairs)


def subsampled_mask(mask: np.ndarray) -> np.ndarray:
    lengths = (np.asarray(mask).sum(axis=1) + 1) // 2
    L = (mask.shape[1] + 1) // 2
    return np.arange(L)[None, :] < lengths[:, None]


class Upsample(Module):
    """BLSTM over fused frames whose per-frame output is split in two halves,
    each half projected by a shared matrix to give two output frames."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.blstm = BLSTM(in_dim, hidden, rng)
        self.proj = Linear(hidden, out_dim, rng)


def upsample(params: Upsample, fused: Tensor, mask: np.ndarray) -> Tensor:
    """``[B, L, F] -> [B, 2L, P]``."""
    if fused.shape[-1] != params.blstm.fwd.in_dim:
        raise ShapeError(f"upsample: input dim {fused.shape[-1]} != {params.blstm.fwd.in_dim}")
    u = params.blstm(fused, mask)
    width = u.shape[-1]
    if width % 2:
        raise ShapeError(f"upsample: BLSTM output dim {width} is odd")
    u_odd, u_even = T.split(u, [width // 2, width // 2], axis=-1)
    o_odd = linear(params.proj, u_odd)
    o_even = linear(params.proj, u_even)
    B, L, P = o_odd.shape
    return T.stack([o_odd, o_even], axis=2).reshape(B, 2 * L, P)


def upsampled_mask(mask: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(mask, dtype=bool), 2, axis=1)


def gradient_reversal(x: Tensor, scale: float = 1.0) -> Tensor:
    if scale <= 0:
        raise ValueError(f"gradient reversal scale must be positive, got {scale}")
    return T.reverse_gradient(x, scale)


class MLPHead(Module):
    """Two fully-connected layers with tanh between, linear output."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.tanh(self.fc1(x)))


def masked_mean(seq: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid frames of ``seq[B, T, E]`` -> ``[B, E]``."""
    m = np.asarray(mask, dtype=seq.data.dtype)
    w = m / m.sum(axis=1, keepdims=True)
    return (seq * Tensor(w[..., None])).sum(axis=1)
