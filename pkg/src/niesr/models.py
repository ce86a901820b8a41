"""Base attention Seq2Seq recogniser, its gradient-reversal variant and the
split-representation invariant model, plus checkpoint I/O.

Checkpoints: magic ``b"NIESR1"``, u32 parameter count, then per parameter
u32 name length, UTF-8 name, u32 rank, u32 dims, float64 data (all
little-endian).  Architecture is recovered from parameter names and shapes.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .attention import DecoderParams, decoder_step, initial_state, project_frames
from .data import EOS, SOS, SequenceBatch, TranscriptBatch
from .layers import (
    BLSTM,
    Linear,
    MLPHead,
    Module,
    Subsample,
    Upsample,
    masked_mean,
    subsample,
    subsampled_mask,
    upsample,
    upsampled_mask,
)
from .tensor import Parameter, Tensor

CKPT_MAGIC = b"NIESR1"


@dataclass
class ModelConfig:
    """Layer sizes.  Defaults follow the published base/invariant settings."""

    feat_dim: int = 40
    vocab_size: int = 30
    enc_dim: int = 200
    proj_dim: int = 200
    att_dim: int = 200
    att_channels: int = 10
    att_kernel: int = 100
    dec_dim: int = 200
    recon_dim: int = 300
    upsample_dim: int = 200
    dis_dim: int = 200
    dropout: float = 0.4
    n_nuisance: int = 0
    clf_dim: int = 200

    @classmethod
    def desk(cls, feat_dim: int, vocab_size: int, **kw) -> ModelConfig:
        """Scaled-down sizes for CPU-speed runs."""
        base = dict(enc_dim=32, proj_dim=32, att_dim=32, dec_dim=32, recon_dim=32,
                    upsample_dim=32, dis_dim=32, clf_dim=32)
        base.update(kw)
        return cls(feat_dim=feat_dim, vocab_size=vocab_size, **base)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})

    def to_json(self) -> dict:
        return asdict(self)


class Encoder(Module):
    """BLSTM, pair-subsampling projection, BLSTM."""

    def __init__(self, feat_dim: int, hidden: int, proj_dim: int, rng: np.random.Generator):
        self.blstm1 = BLSTM(feat_dim, hidden, rng)
        self.sub = Subsample(2 * hidden, proj_dim, rng)
        self.blstm2 = BLSTM(proj_dim, hidden, rng)

    @property
    def out_dim(self) -> int:
        return self.blstm2.out_dim

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        u = self.blstm1(x, mask)
        v = subsample(self.sub, u)
        m2 = subsampled_mask(mask)
        return self.blstm2(v, m2), m2


class Reconstructor(Module):
    """BLSTM + upsampling, a second BLSTM, then a per-frame output projection."""

    def __init__(self, in_dim: int, hidden: int, up_dim: int, feat_dim: int, rng: np.random.Generator):
        self.up = Upsample(in_dim, hidden, up_dim, rng)
        self.blstm = BLSTM(up_dim, hidden, rng)
        self.out = Linear(2 * hidden, feat_dim, rng)

    def __call__(self, fused: Tensor, mask: np.ndarray) -> Tensor:
        o = upsample(self.up, fused, mask)
        return self.out(self.blstm(o, upsampled_mask(mask)))


class SequenceRegressor(Module):
    """BLSTM over a whole embedding sequence, two FC layers per frame."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        self.blstm = BLSTM(in_dim, hidden, rng)
        self.head = MLPHead(2 * hidden, hidden, out_dim, rng)

    def __call__(self, seq: Tensor, mask: np.ndarray) -> Tensor:
        return self.head(self.blstm(seq, mask))


class SequenceClassifier(Module):
    """BLSTM, mean over valid frames, two FC layers -> class logits."""

    def __init__(self, in_dim: int, hidden: int, n_classes: int, rng: np.random.Generator):
        self.blstm = BLSTM(in_dim, hidden, rng)
        self.head = MLPHead(2 * hidden, hidden, n_classes, rng)

    def __call__(self, seq: Tensor, mask: np.ndarray) -> Tensor:
        return self.head(masked_mean(self.blstm(seq, mask), mask))


class BaseModel(Module):
    kind = "base"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.enc = Encoder(cfg.feat_dim, cfg.enc_dim, cfg.proj_dim, rng)
        self.dec = _decoder(cfg, self.enc.out_dim, rng)
        self.assign_names()

    @property
    def asr_encoder(self) -> Encoder:
        return self.enc


class GrlModel(BaseModel):
    """Base model plus a nuisance classifier reading ``h`` through gradient reversal."""

    kind = "grl"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.n_nuisance < 2:
            raise ValueError("GRL baseline needs n_nuisance >= 2")
        super().__init__(cfg, rng)
        self.clf = SequenceClassifier(self.enc.out_dim, cfg.clf_dim, cfg.n_nuisance, rng)
        self.assign_names()


class NiesrModel(Module):
    kind = "niesr"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.enc1 = Encoder(cfg.feat_dim, cfg.enc_dim, cfg.proj_dim, rng)
        self.enc2 = Encoder(cfg.feat_dim, cfg.enc_dim, cfg.proj_dim, rng)
        E = self.enc1.out_dim
        self.dec = _decoder(cfg, E, rng)
        self.recon = Reconstructor(2 * E, cfg.recon_dim, cfg.upsample_dim, cfg.feat_dim, rng)
        self.dis1 = SequenceRegressor(E, cfg.dis_dim, E, rng)
        self.dis2 = SequenceRegressor(E, cfg.dis_dim, E, rng)
        self.assign_names()

    @property
    def asr_encoder(self) -> Encoder:
        return self.enc1

    def players(self) -> tuple[list[Parameter], list[Parameter]]:
        """(P1, P2): encoders/decoder/reconstructor versus the disentanglers."""
        p1, p2 = [], []
        for name, p in self.named_parameters():
            (p2 if name.startswith(("dis1.", "dis2.")) else p1).append(p)
        return p1, p2


def _decoder(cfg: ModelConfig, enc_dim: int, rng) -> DecoderParams:
    return DecoderParams(cfg.vocab_size, enc_dim, cfg.dec_dim, cfg.att_dim, cfg.att_channels, cfg.att_kernel, rng)


MODEL_KINDS = {"base": BaseModel, "grl": GrlModel, "niesr": NiesrModel}


def build_model(kind: str, cfg: ModelConfig, rng: np.random.Generator):
    try:
        return MODEL_KINDS[kind](cfg, rng)
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def encode(enc: Encoder, x: SequenceBatch) -> tuple[Tensor, np.ndarray]:
    return enc(Tensor(x.features), x.mask)


def decode_loss(dec: DecoderParams, h: Tensor, hmask: np.ndarray, y: TranscriptBatch):
    """Teacher-forced cross-entropy.

    Returns ``(L_y, per_utterance, log_dists)`` where ``L_y`` is the
    per-utterance summed negative log-likelihood averaged over the batch.
    """
    B, S = y.ids.shape
    if S == 0 or (y.lengths <= 0).any():
        raise ValueError("empty transcript")
    prev = np.concatenate([np.full((B, 1), SOS), y.ids[:, :-1]], axis=1)
    emb = dec.embed[prev]  # [B, S, E]
    vh = project_frames(dec.att, h)
    state = initial_state(dec, h, hmask)
    smask = y.mask.astype(h.data.dtype)
    rows = np.arange(B)
    total = None
    per_utt = np.zeros(B)
    log_dists = []
    for i in range(S):
        logp, state = decoder_step(dec, emb[:, i], state, h, hmask, vh)
        log_dists.append(logp)
        picked = logp[rows, y.ids[:, i]] * Tensor(smask[:, i])
        per_utt -= picked.data
        step = picked.sum()
        total = step if total is None else total + step
    return total * (-1.0 / B), per_utt, log_dists


def base_forward(model, x: SequenceBatch, y: TranscriptBatch):
    h, hmask = encode(model.asr_encoder, x)
    return decode_loss(model.dec, h, hmask, y)


class DecodeResult(NamedTuple):
    ids: list[list[int]]
    truncated: list[bool]


def greedy_decode(model, x: SequenceBatch, max_len: int) -> DecodeResult:
    """Argmax decoding through the ASR encoder and decoder only."""
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    dec = model.dec
    with T.no_grad():
        h, hmask = encode(model.asr_encoder, x)
        vh = project_frames(dec.att, h)
        state = initial_state(dec, h, hmask)
        B = len(x)
        prev = np.full(B, SOS)
        out: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            logp, state = decoder_step(dec, dec.embed[prev], state, h, hmask, vh)
            prev = logp.data.argmax(axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if prev[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(prev[b]))
            if done.all():
                break
    return DecodeResult(out, [not d for d in done])


class ForwardBundle(NamedTuple):
    L_y: Tensor
    L_y_per_utt: np.ndarray
    x_rec: Tensor
    h1: Tensor
    h2: Tensor
    h_mask: np.ndarray
    dis1_out: Tensor
    dis2_out: Tensor


def niesr_forward(model: NiesrModel, x: SequenceBatch, y: TranscriptBatch, training: bool,
                  rng: np.random.Generator | None = None) -> ForwardBundle:
    h1, hmask = encode(model.enc1, x)
    h2, _ = encode(model.enc2, x)
    L_y, per_utt, _ = decode_loss(model.dec, h1, hmask, y)
    h1_noisy = T.dropout(h1, model.config.dropout, training, rng)
    x_rec = model.recon(T.concat([h1_noisy, h2], axis=-1), hmask)
    x_rec = fit_length(x_rec, x.features.shape[1])
    return ForwardBundle(L_y, per_utt, x_rec, h1, h2, hmask, model.dis1(h1, hmask), model.dis2(h2, hmask))


def fit_length(seq: Tensor, length: int) -> Tensor:
    """Truncate or zero-pad ``seq[B, T', D]`` along time to ``length``."""
    cur = seq.shape[1]
    if cur == length:
        return seq
    if cur > length:
        return seq[:, :length]
    pad = Tensor(np.zeros((seq.shape[0], length - cur, seq.shape[2])))
    return T.concat([seq, pad], axis=1)


def embeddings(model, x: SequenceBatch, source: str) -> tuple[np.ndarray, np.ndarray]:
    """Frozen encoder outputs ``(h [B, L, E], mask [B, L])`` for ``source``
    in {h, h1, h2}."""
    if model.kind == "niesr":
        encoders = {"h1": model.enc1, "h2": model.enc2}
    else:
        encoders = {"h": model.enc}
    if source not in encoders:
        raise ValueError(f"embedding {source!r} is not available for a {model.kind} model")
    with T.no_grad():
        h, m = encode(encoders[source], x)
    return h.data.copy(), m


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model_or_params) -> None:
    if isinstance(model_or_params, Module):
        items = [(n, p.data) for n, p in model_or_params.named_parameters()]
    else:
        items = list(model_or_params.items())
    chunks = [CKPT_MAGIC, struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:6] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    pos = 6

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after last parameter")
    return params


def config_from_params(params: dict[str, np.ndarray]) -> tuple[str, ModelConfig]:
    if "enc2.blstm1.fwd.w_ih" in params:
        kind, enc = "niesr", "enc1"
    elif any(k.startswith("clf.") for k in params):
        kind, enc = "grl", "enc"
    else:
        kind, enc = "base", "enc"
    try:
        F = params["dec.att.F"]
        cfg = ModelConfig(
            feat_dim=params[f"{enc}.blstm1.fwd.w_ih"].shape[1],
            vocab_size=params["dec.embed"].shape[0],
            enc_dim=params[f"{enc}.blstm1.fwd.w_hh"].shape[1],
            proj_dim=params[f"{enc}.sub.w"].shape[0],
            att_dim=params["dec.att.w"].shape[0],
            att_channels=F.shape[1],
            att_kernel=F.shape[0],
            dec_dim=params["dec.embed"].shape[1],
        )
        if kind == "niesr":
            cfg.recon_dim = params["recon.up.blstm.fwd.w_hh"].shape[1]
            cfg.upsample_dim = params["recon.up.proj.w"].shape[0]
            cfg.dis_dim = params["dis1.blstm.fwd.w_hh"].shape[1]
        if kind == "grl":
            cfg.clf_dim = params["clf.blstm.fwd.w_hh"].shape[1]
            cfg.n_nuisance = params["clf.head.fc2.w"].shape[0]
    except KeyError as e:
        raise CheckpointError(f"checkpoint lacks parameter {e}") from None
    return kind, cfg


def load_params(model: Module, params: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise CheckpointError(f"parameter names differ from model: {missing[:5]}")
    for name, p in own.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape} != {p.shape}")
        p.data = params[name].copy()


def load_model(path):
    params = read_checkpoint(path)
    kind, cfg = config_from_params(params)
    model = build_model(kind, cfg, np.random.default_rng(0))
    load_params(model, params)
    return model


def snapshot(model: Module) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()}
