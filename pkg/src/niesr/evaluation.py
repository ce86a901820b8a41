"""Character error rate and nuisance probes on frozen embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Utterance, Vocabulary, batch_pad, make_batches, stratified_split
from .models import SequenceClassifier, greedy_decode
from .tensor import Tensor
from .training import Adam, clip_grad_norm, cross_entropy


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        raise ValueError("CER needs a non-empty reference")
    return levenshtein(reference, hypothesis) / len(reference)


def relative_improvement(base: float, ours: float) -> float:
    """``(base - ours) / base``; positive when ``ours`` is better."""
    if base == 0:
        raise ValueError("baseline CER is zero")
    return (base - ours) / base


def transcribe(model, corpus: Sequence[Utterance], vocab: Vocabulary, batch_size: int = 32,
               max_len: int | None = None) -> list[str]:
    if max_len is None:
        max_len = max(len(u.transcript) for u in corpus) + 5
    hyps = {}
    for chunk in make_batches(corpus, batch_size):
        x, _ = batch_pad(chunk)
        res = greedy_decode(model, x, max_len)
        for u, ids in zip(chunk, res.ids):
            hyps[u.id] = vocab.decode(ids)
    return [hyps[u.id] for u in corpus]


def corpus_cer(model, corpus: Sequence[Utterance], vocab: Vocabulary, batch_size: int = 32) -> float:
    """Total edit distance over total reference length."""
    if not corpus:
        raise ValueError("empty corpus")
    refs = [vocab.decode(u.transcript) for u in corpus]
    hyps = transcribe(model, corpus, vocab, batch_size)
    return micro_cer(refs, hyps)


def micro_cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("references are empty")
    return sum(levenshtein(r, h) for r, h in zip(refs, hyps)) / total


def macro_cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return float(np.mean([cer(r, h) for r, h in zip(refs, hyps)]))


# ---------------------------------------------------------------------------
# nuisance probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    target: str = "speaker"
    source: str = "h"
    hidden: int = 32
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.target not in ("speaker", "env"):
            raise ValueError(f"probe target must be speaker or env, got {self.target!r}")
        if self.source not in ("h", "h1", "h2"):
            raise ValueError(f"probe source must be h, h1 or h2, got {self.source!r}")


def _pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    L = max(s.shape[0] for s in seqs)
    out = np.zeros((len(seqs), L, seqs[0].shape[1]))
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def probe_train_eval(embeddings: Sequence[np.ndarray], labels: Sequence[int], cfg: ProbeConfig,
                     split: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Fit a sequence classifier on the train part of ``split`` and return
    its accuracy on the held-out part.

    ``embeddings`` are per-utterance ``[L, E]`` arrays copied off a frozen
    model.  Without ``split`` an 80/20 split stratified by label is drawn.
    """
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(cfg.seed)
    if split is None:
        split = stratified_split(labels, 0.8, rng)
    tr, te = split
    if len(tr) == 0 or len(te) == 0:
        raise ValueError("probe split needs non-empty train and test parts")
    classes = np.unique(labels[tr])
    if len(classes) < 2:
        raise ValueError("probe training split holds a single class")
    n_classes = int(labels.max()) + 1
    E = embeddings[0].shape[1]
    clf = SequenceClassifier(E, cfg.hidden, n_classes, rng)
    clf.assign_names("probe.")
    opt = Adam(clf.parameters(), cfg.lr)

    for _ in range(cfg.epochs):
        order = rng.permutation(tr)
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x, m = _pad([embeddings[i] for i in idx])
            loss = cross_entropy(clf(Tensor(x), m), labels[idx])
            opt.zero_grad()
            T.backward(loss)
            clip_grad_norm(opt.params, 5.0)
            opt.step()

    correct = 0
    with T.no_grad():
        for s in range(0, len(te), 64):
            idx = te[s : s + 64]
            x, m = _pad([embeddings[i] for i in idx])
            pred = clf(Tensor(x), m).data.argmax(axis=-1)
            correct += int((pred == labels[idx]).sum())
    return correct / len(te)


def probe_model(model, corpus: Sequence[Utterance], cfg: ProbeConfig,
                split: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Extract ``cfg.source`` embeddings from a frozen model and probe them."""
    from .models import embeddings as extract

    embs = {}
    for chunk in make_batches(corpus, 32):
        x, _ = batch_pad(chunk)
        h, m = extract(model, x, cfg.source)
        for u, hb, mb in zip(chunk, h, m):
            embs[u.id] = hb[mb]
    labels = [getattr(u, cfg.target) for u in corpus]
    if any(z is None for z in labels):
        raise ValueError(f"corpus lacks {cfg.target} labels")
    return probe_train_eval([embs[u.id] for u in corpus], labels, cfg, split)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

PROBE_TARGETS = ("speaker", "env")
PROBE_SOURCES = ("h", "h1", "h2")


def _fmt(v, pct=True) -> str:
    if v is None:
        return "--"
    return f"{100 * v:.2f}" if pct else f"{v:.4f}"


def report(runs: Sequence[dict]) -> tuple[str, dict]:
    """Render CER and probe tables; returns ``(text, json_obj)``."""
    clean = []
    for r in runs:
        for key in ("name", "cer"):
            if key not in r:
                raise KeyError(f"run is missing field {key!r}")
        clean.append({
            "name": r["name"],
            "cer": r["cer"],
            "rel_improvement": r.get("rel_improvement"),
            "probes": {t: dict(v) for t, v in (r.get("probes") or {}).items()},
        })

    lines = [f"{'Model':<16}{'CER (%)':>10}{'Rel. impr. (%)':>16}"]
    for r in clean:
        lines.append(f"{r['name']:<16}{_fmt(r['cer']):>10}{_fmt(r['rel_improvement']):>16}")
    lines.append("")
    lines.append(f"{'Model':<16}{'Predict z from':>16}{'Speaker':>10}{'Env':>10}")
    for r in clean:
        for src in PROBE_SOURCES:
            vals = [r["probes"].get(t, {}).get(src) for t in PROBE_TARGETS]
            if all(v is None for v in vals):
                continue
            lines.append(f"{r['name']:<16}{src:>16}" + "".join(f"{_fmt(v):>10}" for v in vals))
    return "\n".join(lines) + "\n", {"runs": clean}


def write_report(path, runs: Sequence[dict]) -> str:
    text, obj = report(runs)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")
    return text
