"""Location-aware content-based attention and the attention decoder step.

Energies score every encoder frame from the decoder state, the frame itself
and a convolution of the previous alignment::

    e[j] = w . tanh(W s + V h[j] + U (F * alpha_prev)[j] + b)
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .layers import Linear, LSTMCell, Module, linear, lstm_cell_step, uniform_init
from .tensor import Parameter, ShapeError, Tensor

MASK_SENTINEL = -1e9


class AttentionParams(Module):
    def __init__(self, state_dim: int, enc_dim: int, att_dim: int, channels: int, kernel: int,
                 rng: np.random.Generator):
        self.w = Parameter(uniform_init(rng, (att_dim,), att_dim))
        self.b = Parameter(np.zeros(att_dim))
        self.W = Parameter(uniform_init(rng, (att_dim, state_dim), state_dim))
        self.V = Parameter(uniform_init(rng, (att_dim, enc_dim), enc_dim))
        self.U = Parameter(uniform_init(rng, (att_dim, channels), channels))
        self.F = Parameter(uniform_init(rng, (kernel, channels), kernel))

    @property
    def att_dim(self) -> int:
        return self.w.shape[0]


class DecoderState(NamedTuple):
    s: Tensor
    cell: Tensor
    alpha: Tensor
    context: Tensor


def project_frames(params: AttentionParams, h: Tensor) -> Tensor:
    """``V h[j]`` for every frame; constant across decoder steps."""
    return h @ T.transpose(params.V)


def attention_energies(params: AttentionParams, s: Tensor, h: Tensor, alpha_prev: Tensor,
                       mask: np.ndarray, vh: Tensor | None = None) -> Tensor:
    """Energies ``[B, L]`` (or ``[L]`` when unbatched); masked frames get -1e9."""
    unbatched = h.ndim == 2
    if unbatched:
        h = h.reshape(1, *h.shape)
        s = s.reshape(1, -1)
        alpha_prev = alpha_prev.reshape(1, -1)
        mask = np.asarray(mask, dtype=bool).reshape(1, -1)
        if vh is not None:
            vh = vh.reshape(1, *vh.shape)
    B, L, _ = h.shape
    if L == 0:
        raise ShapeError("attention over zero encoder frames")
    if vh is None:
        vh = project_frames(params, h)
    A = params.att_dim
    ws = (s @ T.transpose(params.W)).reshape(B, 1, A)
    loc = T.conv1d(alpha_prev, params.F) @ T.transpose(params.U)  # [B, L, A]
    pre = T.tanh(ws + vh + loc + params.b.reshape(1, 1, A))
    e = (pre @ params.w.reshape(A, 1)).reshape(B, L)
    m = np.asarray(mask, dtype=e.data.dtype)
    e = e * Tensor(m) + Tensor((1.0 - m) * MASK_SENTINEL)
    return e.reshape(L) if unbatched else e


def attention_context(energies: Tensor, h: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Alignment over valid frames and the weighted sum of encoder frames."""
    alpha = T.softmax(energies, mask=mask)
    if h.ndim == 2:
        c = (alpha.reshape(-1, 1) * h).sum(axis=0)
    else:
        c = (alpha.reshape(*alpha.shape, 1) * h).sum(axis=1)
    return alpha, c


class DecoderParams(Module):
    """Character embedding, transducer LSTM, attention and CharDist layer."""

    def __init__(self, vocab_size: int, enc_dim: int, dec_dim: int, att_dim: int, channels: int,
                 kernel: int, rng: np.random.Generator):
        if vocab_size <= 0:
            raise ValueError("vocabulary size must be positive")
        self.embed = Parameter(uniform_init(rng, (vocab_size, dec_dim), dec_dim))
        self.lstm = LSTMCell(dec_dim + enc_dim, dec_dim, rng)
        self.att = AttentionParams(dec_dim, enc_dim, att_dim, channels, kernel, rng)
        self.char_dist = Linear(dec_dim + enc_dim, vocab_size, rng)

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


def initial_state(dec: DecoderParams, h: Tensor, mask: np.ndarray) -> DecoderState:
    """Zero LSTM state and context, uniform alignment over valid frames."""
    B, L, E = h.shape
    m = np.asarray(mask, dtype=h.data.dtype)
    H = dec.lstm.hidden
    return DecoderState(
        s=Tensor(np.zeros((B, H))),
        cell=Tensor(np.zeros((B, H))),
        alpha=Tensor(m / m.sum(axis=1, keepdims=True)),
        context=Tensor(np.zeros((B, E))),
    )


def decoder_step(dec: DecoderParams, y_prev_embed: Tensor, state: DecoderState, h: Tensor,
                 mask: np.ndarray, vh: Tensor | None = None) -> tuple[Tensor, DecoderState]:
    """One teacher-forced or free-running step.

    Returns log-probabilities over the vocabulary (``exp`` gives CharDist)
    and the updated state.
    """
    if dec.vocab_size == 0:
        raise ValueError("empty vocabulary")
    x = T.concat([y_prev_embed, state.context], axis=-1)
    s, cell = lstm_cell_step(dec.lstm, x, state.s, state.cell)
    e = attention_energies(dec.att, s, h, state.alpha, mask, vh)
    alpha, c = attention_context(e, h, mask)
    logits = linear(dec.char_dist, T.concat([s, c], axis=-1))
    return T.log_softmax(logits), DecoderState(s, cell, alpha, c)
