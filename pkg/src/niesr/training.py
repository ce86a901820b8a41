"""Losses, Adam, the scheduled two-player update and the epoch loop."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import SequenceBatch, TranscriptBatch, Utterance, Vocabulary, batch_pad, make_batches
from .layers import gradient_reversal
from .models import (
    ModelConfig,
    NiesrModel,
    base_forward,
    build_model,
    decode_loss,
    encode,
    load_params,
    niesr_forward,
    snapshot,
)
from .tensor import NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)

# published weight triples (alpha, beta, gamma)
LOSS_WEIGHTS = {
    "wsj0": (100.0, 10.0, 1.0),
    "chime3": (100.0, 1.0, 0.5),
    "timit": (100.0, 50.0, 1.0),
}


@dataclass
class TrainConfig:
    alpha: float = 100.0
    beta: float = 10.0
    gamma: float = 1.0
    lr_p1: float = 5e-4
    lr_p2: float = 1e-3
    ratio_p1_to_p2: tuple[int, int] = (1, 5)
    patience: int = 30
    batch_size: int = 8
    max_epochs: int = 1000
    seed: int = 0
    grl_scale: float = 1.0
    grl_target: str = "speaker"
    clip_norm: float = 5.0
    p2_fresh_batches: bool = False
    record_wall_time: bool = False
    stop_at_zero: bool = True
    preset: str = "full"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ratio_p1_to_p2 = tuple(int(r) for r in self.ratio_p1_to_p2)
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if len(self.ratio_p1_to_p2) != 2 or min(self.ratio_p1_to_p2) < 1:
            raise ValueError("ratio_p1_to_p2 must be two positive integers")
        if self.preset not in ("full", "desk"):
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.grl_target not in ("speaker", "env"):
            raise ValueError(f"grl_target must be speaker or env, got {self.grl_target!r}")

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        """CPU-scale preset: 32-wide layers, patience 10."""
        kw.setdefault("patience", 10)
        kw.setdefault("lr_p1", 2e-3)
        kw.setdefault("lr_p2", 4e-3)
        return cls(preset="desk", **kw)

    @classmethod
    def from_json(cls, obj: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_json(self) -> dict:
        d = asdict(self)
        d["ratio_p1_to_p2"] = list(self.ratio_p1_to_p2)
        return d

    def model_config(self, feat_dim: int, vocab_size: int, n_nuisance: int = 0) -> ModelConfig:
        base = ModelConfig.desk if self.preset == "desk" else ModelConfig
        if self.preset == "desk":
            cfg = base(feat_dim, vocab_size)
        else:
            cfg = base(feat_dim=feat_dim, vocab_size=vocab_size)
        cfg.n_nuisance = n_nuisance
        for k, v in self.model.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown model field {k!r}")
            setattr(cfg, k, v)
        return cfg


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean of squared error over valid frames and all feature dims."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    m = np.asarray(mask, dtype=pred.data.dtype)
    count = m.sum() * pred.shape[-1]
    sq = T.square(pred - target) * Tensor(m[..., None])
    return sq.sum() * (1.0 / count)


def loss_recon(x, x_rec: Tensor, lengths: np.ndarray) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = np.arange(x.shape[1])[None, :] < np.asarray(lengths)[:, None]
    return masked_mse(x_rec, x, mask)


def loss_disentangle(dis1_out: Tensor, dis2_out: Tensor, t1, t2, mask: np.ndarray) -> Tensor:
    return masked_mse(dis1_out, t1, mask) + masked_mse(dis2_out, t2, mask)


def make_targets(h1: Tensor, h2: Tensor, updating: str, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Disentangler targets ``(t1, t2)``.

    When the disentanglers train ("P2") they chase the real embeddings,
    copied off the tape.  When everything else trains ("P1") the targets are
    standard-normal noise.
    """
    if updating == "P2":
        return Tensor(h2.data.copy()), Tensor(h1.data.copy())
    if updating == "P1":
        return Tensor(rng.standard_normal(h2.shape)), Tensor(rng.standard_normal(h1.shape))
    raise ValueError(f"updating must be 'P1' or 'P2', got {updating!r}")


def loss_total(L_y, L_x, L_d, cfg: TrainConfig):
    return L_y * cfg.alpha + L_x * cfg.beta + L_d * cfg.gamma


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits)
    return logp[np.arange(len(labels)), np.asarray(labels)].mean() * -1.0


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; ``step`` reads each parameter's ``.grad``."""

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> set[str]:
        """Apply one update; returns the names of parameters it changed."""
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for {p.name or p!r}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        touched = set()
        for k, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            touched.add(p.name)
        return touched


def adam_step(state: Adam, params: Sequence[Parameter], grads: Sequence[np.ndarray], lr: float) -> set[str]:
    """Functional form: install ``grads`` and step ``state`` at ``lr``."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("params do not match the optimiser state")
    for p, g in zip(params, grads):
        if g is not None and np.shape(g) != p.shape:
            raise T.ShapeError(f"{p.name}: gradient shape {np.shape(g)} != {p.shape}")
        p.grad = None if g is None else np.asarray(g, dtype=p.data.dtype)
    state.lr = lr
    return state.step()


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@contextlib.contextmanager
def frozen(params: Sequence[Parameter]):
    """Stop gradients from reaching ``params`` inside the block."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
        p.grad = None
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _minimise(loss: Tensor, opt: Adam, clip: float) -> set[str]:
    opt.zero_grad()
    T.backward(loss)
    clip_grad_norm(opt.params, clip)
    return opt.step()


# ---------------------------------------------------------------------------
# the two-player round
# ---------------------------------------------------------------------------


def scheduled_round(model: NiesrModel, batch, cfg: TrainConfig, opt_p1: Adam, opt_p2: Adam,
                    rng: np.random.Generator, p2_batches=None) -> dict:
    """P1 updates on the full weighted loss with random disentangler targets,
    then P2 updates on the disentangler loss with the real embeddings as
    targets.  Each player is frozen while the other moves.
    """
    x, y = batch
    n1, n2 = cfg.ratio_p1_to_p2
    p1, p2 = model.players()
    out = {"touched_p1": set(), "touched_p2": set(), "L_d_p2_steps": []}

    with frozen(p2):
        for _ in range(n1):
            fwd = niesr_forward(model, x, y, training=True, rng=rng)
            t1, t2 = make_targets(fwd.h1, fwd.h2, "P1", rng)
            L_x = loss_recon(x.features, fwd.x_rec, x.lengths)
            L_d = loss_disentangle(fwd.dis1_out, fwd.dis2_out, t1, t2, fwd.h_mask)
            out["touched_p1"] |= _minimise(loss_total(fwd.L_y, L_x, L_d, cfg), opt_p1, cfg.clip_norm)
    out.update(L_y=fwd.L_y.item(), L_x=L_x.item(), L_d_p1=L_d.item())

    batches = p2_batches or [batch]
    cache = {}
    with frozen(p1):
        for k in range(n2):
            bx, _ = batches[k % len(batches)]
            key = k % len(batches)
            if key not in cache:
                with T.no_grad():
                    h1, m = encode(model.enc1, bx)
                    h2, _ = encode(model.enc2, bx)
                t1, t2 = make_targets(h1, h2, "P2", rng)
                cache[key] = (h1.detach(), h2.detach(), m, t1, t2)
            h1, h2, m, t1, t2 = cache[key]
            L_d = loss_disentangle(model.dis1(h1, m), model.dis2(h2, m), t1, t2, m)
            out["touched_p2"] |= _minimise(L_d, opt_p2, cfg.clip_norm)
            out["L_d_p2_steps"].append(L_d.item())
    out["L_d_p2"] = float(np.mean(out["L_d_p2_steps"]))
    return out


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    best_params: dict
    log: list
    best_epoch: int
    diverged: bool = False
    timings_ms: list = field(default_factory=list)


def nuisance_labels(utts: Sequence[Utterance], target: str) -> np.ndarray:
    vals = [getattr(u, target) for u in utts]
    if any(v is None for v in vals):
        raise ValueError(f"utterances lack {target} labels")
    return np.asarray(vals, dtype=int)


def _grl_loss(model, x: SequenceBatch, y: TranscriptBatch, z: np.ndarray, scale: float):
    h, hmask = encode(model.enc, x)
    L_y, _, _ = decode_loss(model.dec, h, hmask, y)
    logits = model.clf(gradient_reversal(h, scale), hmask)
    return L_y, cross_entropy(logits, z)


def train(kind: str, train_set: Sequence[Utterance], dev_set: Sequence[Utterance], cfg: TrainConfig,
          vocab: Vocabulary, evaluate: Callable | None = None, log_path=None, model=None) -> TrainResult:
    """Epoch loop with dev-CER early stopping.

    ``evaluate(model) -> float`` replaces the dev CER when given.  Training
    also stops once the dev metric reaches 0 unless ``cfg.stop_at_zero`` is
    off (equal-budget comparisons need that).
    """
    from .evaluation import corpus_cer

    if not train_set or not dev_set:
        raise ValueError("train and dev splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    n_nuis = 0
    if kind == "grl":
        n_nuis = int(nuisance_labels(train_set, cfg.grl_target).max()) + 1
    if model is None:
        mcfg = cfg.model_config(train_set[0].features.shape[1], len(vocab), n_nuis)
        model = build_model(kind, mcfg, rng)
    if evaluate is None:
        def evaluate(m):
            return corpus_cer(m, dev_set, vocab)

    if kind == "niesr":
        p1, p2 = model.players()
        opt_p1, opt_p2 = Adam(p1, cfg.lr_p1), Adam(p2, cfg.lr_p2)
    else:
        opt = Adam(model.parameters(), cfg.lr_p1)

    records, timings = [], []
    best, best_epoch, best_metric, since = snapshot(model), 0, np.inf, 0
    diverged = False
    handle = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            last_good = snapshot(model)
            sums: dict[str, list] = {"L_y": [], "L_x": [], "L_d_p1": [], "L_d_p2": []}
            batches = [batch_pad(b) + (b,) for b in make_batches(train_set, cfg.batch_size, rng)]
            try:
                for bi, (x, y, utts) in enumerate(batches):
                    if kind == "niesr":
                        extra = None
                        if cfg.p2_fresh_batches:
                            picks = rng.choice(len(batches), size=cfg.ratio_p1_to_p2[1])
                            extra = [batches[j][:2] for j in picks]
                        m = scheduled_round(model, (x, y), cfg, opt_p1, opt_p2, rng, extra)
                        for k in sums:
                            sums[k].append(m[k])
                    elif kind == "grl":
                        z = nuisance_labels(utts, cfg.grl_target)
                        L_y, L_z = _grl_loss(model, x, y, z, cfg.grl_scale)
                        _minimise(L_y + L_z, opt, cfg.clip_norm)
                        sums["L_y"].append(L_y.item())
                    else:
                        L_y, _, _ = base_forward(model, x, y)
                        _minimise(L_y, opt, cfg.clip_norm)
                        sums["L_y"].append(L_y.item())
            except NonFiniteError as e:
                log.warning("epoch %d diverged: %s", epoch, e)
                load_params(model, last_good)
                diverged = True
                break
            metric = float(evaluate(model))
            wall = (time.perf_counter() - t0) * 1000.0
            timings.append(wall)
            rec = {"epoch": epoch}
            for k, v in sums.items():
                rec[k] = float(np.mean(v)) if v else None
            rec["dev_cer"] = metric
            rec["wall_ms"] = round(wall, 3) if cfg.record_wall_time else None
            records.append(rec)
            if handle:
                handle.write(json.dumps(rec) + "\n")
                handle.flush()
            if metric < best_metric:
                best, best_epoch, best_metric, since = snapshot(model), epoch, metric, 0
            else:
                since += 1
            if since >= cfg.patience or (cfg.stop_at_zero and best_metric == 0.0):
                break
    finally:
        if handle:
            handle.close()
    if best_epoch == 0:
        best = snapshot(model)
    return TrainResult(model, best, records, best_epoch, diverged, timings)
