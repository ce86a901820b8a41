"""``niesr`` command line: datagen, train, eval, probe.

Exit codes: 0 success, 1 runtime failure, 2 usage or contract error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SynthSpec, Vocabulary, corpus_stats, generate_splits, read_corpus, write_corpus
from .evaluation import ProbeConfig, corpus_cer, probe_model, relative_improvement, stratified_split, write_report
from .models import CheckpointError, load_model, save_checkpoint
from .training import TrainConfig, nuisance_labels, train

SPLITS = ("train", "dev", "test")


class UsageError(Exception):
    """Bad flags or a violated command contract (exit 2)."""


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=100, max_help_position=32)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="niesr", formatter_class=_formatter,
                                description="Nuisance-invariant end-to-end speech recognition.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("datagen", formatter_class=_formatter, help="write a synthetic corpus")
    g.add_argument("--spec", type=Path, help="SynthSpec JSON file (defaults used when omitted)")
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--n-train", type=int, required=True)
    g.add_argument("--n-dev", type=int, required=True)
    g.add_argument("--n-test", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", formatter_class=_formatter, help="train a model")
    t.add_argument("--model", choices=("base", "niesr", "grl"), required=True)
    t.add_argument("--data", type=Path, required=True, help="corpus directory written by datagen")
    t.add_argument("--config", type=Path, help="TrainConfig JSON file")
    t.add_argument("--run", type=Path, required=True, help="run directory")
    t.add_argument("--seed", type=int, help="overrides the config seed")

    e = sub.add_parser("eval", formatter_class=_formatter, help="greedy-decode a split and report CER")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--report", type=Path, required=True)
    e.add_argument("--baseline-cer", type=float, help="CER of a reference model for relative improvement")
    e.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("probe", formatter_class=_formatter, help="measure nuisance information in an embedding")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--embedding", choices=("h", "h1", "h2"), required=True)
    r.add_argument("--target", choices=("speaker", "env"), required=True)
    r.add_argument("--report", type=Path, required=True)
    r.add_argument("--split", choices=SPLITS, default="train")
    r.add_argument("--epochs", type=int, default=ProbeConfig.epochs)
    r.add_argument("--seed", type=int, default=0)
    return p


def _threads() -> int:
    """Worker cap for the BLAS pool from ``NIESR_THREADS`` (0 leaves it alone)."""
    raw = os.environ.get("NIESR_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NIESR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("NIESR_THREADS must be >= 0")
    return n


def _load_split(data: Path, split: str) -> tuple[Vocabulary, list]:
    if not data.is_dir():
        raise UsageError(f"data directory {data} does not exist")
    vocab_path = data / "vocab.json"
    if not vocab_path.exists():
        raise UsageError(f"{vocab_path} not found")
    vocab = Vocabulary.load(vocab_path)
    manifest = data / split / "manifest.jsonl"
    if not manifest.exists():
        raise UsageError(f"manifest {manifest} not found")
    return vocab, read_corpus(manifest, vocab)


@contextlib.contextmanager
def _locked(run: Path):
    run.mkdir(parents=True, exist_ok=True)
    lock = run / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"run directory {run} is locked by another process ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def cmd_datagen(args) -> int:
    for flag in ("n_train", "n_dev", "n_test"):
        if getattr(args, flag) < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 1")
    spec = SynthSpec()
    if args.spec is not None:
        if not args.spec.exists():
            raise UsageError(f"spec file {args.spec} does not exist")
        spec = SynthSpec.from_json(json.loads(args.spec.read_text()))
    rng = np.random.default_rng(args.seed)
    splits = generate_splits(spec, args.n_train, args.n_dev, args.n_test, rng)
    vocab = spec.vocabulary()
    args.out.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out / "vocab.json")
    (args.out / "spec.json").write_text(json.dumps(spec.to_json(), indent=2) + "\n")
    for name, utts in splits.items():
        write_corpus(args.out / name, utts, vocab)
        s = corpus_stats(utts)
        print(f"{name}: {s['utterances']} utterances, {s['frames']} frames, speakers {s['speakers']}, envs {s['envs']}")
    print("wrote " + " ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_train(args) -> int:
    vocab, train_set = _load_split(args.data, "train")
    _, dev_set = _load_split(args.data, "dev")
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} does not exist")
        try:
            cfg = TrainConfig.load(args.config)
        except (ValueError, TypeError) as e:
            raise UsageError(f"bad config {args.config}: {e}") from None
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.model == "grl":
        try:
            nuisance_labels(train_set, cfg.grl_target)
        except ValueError:
            raise UsageError(f"--model grl needs '{cfg.grl_target}' labels in the train manifest") from None

    with _locked(args.run):
        (args.run / "config.json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n")
        res = train(args.model, train_set, dev_set, cfg, vocab, log_path=args.run / "train_log.jsonl")
        for stale in args.run.glob("*.ckpt"):
            stale.unlink()
        save_checkpoint(args.run / "best.ckpt", res.best_params)
        with open(args.run / "timing.jsonl", "w") as f:
            for epoch, ms in enumerate(res.timings_ms, 1):
                f.write(json.dumps({"epoch": epoch, "wall_ms": round(ms, 3)}) + "\n")
    if res.diverged:
        print(f"training diverged; kept the last finite checkpoint in {args.run / 'best.ckpt'}", file=sys.stderr)
        return 1
    best = res.log[res.best_epoch - 1]["dev_cer"] if res.best_epoch else float("nan")
    print(f"trained {args.model} for {len(res.log)} epochs; best dev CER {best:.4f} at epoch {res.best_epoch}")
    return 0


def _load_ckpt(path: Path):
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_model(path)


def cmd_eval(args) -> int:
    vocab, corpus = _load_split(args.data, args.split)
    model = _load_ckpt(args.ckpt)
    if model.config.vocab_size != len(vocab):
        raise CheckpointError(f"checkpoint vocabulary size {model.config.vocab_size} != corpus vocabulary {len(vocab)}")
    if model.config.feat_dim != corpus[0].features.shape[1]:
        raise CheckpointError(f"checkpoint feature dim {model.config.feat_dim} != corpus {corpus[0].features.shape[1]}")
    value = corpus_cer(model, corpus, vocab)
    rel = relative_improvement(args.baseline_cer, value) if args.baseline_cer else None
    text = write_report(args.report, [{"name": args.ckpt.stem, "cer": value, "rel_improvement": rel, "probes": {}}])
    print(text, end="")
    return 0


def cmd_probe(args) -> int:
    vocab, corpus = _load_split(args.data, args.split)
    model = _load_ckpt(args.ckpt)
    allowed = ("h1", "h2") if model.kind == "niesr" else ("h",)
    if args.embedding not in allowed:
        raise UsageError(f"a {model.kind} checkpoint has no '{args.embedding}' embedding (choose from {list(allowed)})")
    labels = [getattr(u, args.target) for u in corpus]
    if any(z is None for z in labels):
        raise UsageError(f"manifest lacks '{args.target}' labels")
    cfg = ProbeConfig(target=args.target, source=args.embedding, epochs=args.epochs, seed=args.seed)
    split = stratified_split(labels, 0.8, np.random.default_rng(args.seed))
    acc = probe_model(model, corpus, cfg, split)
    run = {"name": args.ckpt.stem, "cer": None, "rel_improvement": None,
           "probes": {args.target: {args.embedding: acc}}}
    print(write_report(args.report, [run]), end="")
    return 0


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        n = _threads()
        with threadpool_limits(limits=n if n > 0 else None):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"niesr {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 1
        print(f"niesr {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
