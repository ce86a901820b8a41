"""Corpora: synthetic nuisance-controlled utterances, log-Mel features,
vocabulary handling, batching and the on-disk manifest/feature formats.

Feature files (``FEAT1``) hold a 6-byte magic ``b"FEAT1\\x00"``, u32 rows,
u32 cols and a float32 little-endian row-major payload.  Features are float64
in memory; the synthetic generator rounds its output to float32 precision so
that a write/read cycle is exact.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import get_window

PAD, SOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<sos>", "<eos>")

FEAT_MAGIC = b"FEAT1\x00"


class FormatError(ValueError):
    """A file on disk does not follow the expected layout."""


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocabulary:
    """Characters plus the fixed ids ``<pad>=0, <sos>=1, <eos>=2``."""

    def __init__(self, chars: Iterable[str]):
        chars = list(chars)
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocabulary")
        self.chars = chars
        self._id = {ch: i + len(SPECIALS) for i, ch in enumerate(chars)}

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.chars)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.chars == self.chars

    def encode(self, text: str) -> list[int]:
        """Uppercase ``text`` and map it to ids, appending ``<eos>``."""
        ids = []
        for ch in text.upper():
            if ch not in self._id:
                raise ValueError(f"character {ch!r} is not in the vocabulary")
            ids.append(self._id[ch])
        return ids + [EOS]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < len(SPECIALS):
                continue
            out.append(self.chars[i - len(SPECIALS)])
        return "".join(out)

    def to_json(self) -> dict:
        return {"chars": "".join(self.chars)}

    @classmethod
    def from_json(cls, obj: dict) -> Vocabulary:
        return cls(obj["chars"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> Vocabulary:
        return cls.from_json(json.loads(Path(path).read_text()))


def encode_transcript(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.encode(text)


def decode_transcript(vocab: Vocabulary, ids: Iterable[int]) -> str:
    return vocab.decode(ids)


# ---------------------------------------------------------------------------
# utterances and batches
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, D]
    transcript: list[int]  # ends with <eos>
    speaker: int | None = None
    env: int | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"utterance {self.id}: features must be [T>=1, D], got {self.features.shape}")
        if not self.transcript:
            raise ValueError(f"utterance {self.id}: empty transcript")


@dataclass
class SequenceBatch:
    features: np.ndarray  # [B, T, D], zero padded
    lengths: np.ndarray  # [B]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.features.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return len(self.lengths)


@dataclass
class TranscriptBatch:
    ids: np.ndarray  # [B, S], PAD padded
    lengths: np.ndarray  # [B]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]


def batch_pad(utts: Sequence[Utterance]) -> tuple[SequenceBatch, TranscriptBatch]:
    if not utts:
        raise ValueError("batch_pad needs at least one utterance")
    T = max(u.features.shape[0] for u in utts)
    D = utts[0].features.shape[1]
    S = max(len(u.transcript) for u in utts)
    feats = np.zeros((len(utts), T, D))
    ids = np.full((len(utts), S), PAD, dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : u.features.shape[0]] = u.features
        ids[i, : len(u.transcript)] = u.transcript
    return (
        SequenceBatch(feats, np.array([u.features.shape[0] for u in utts])),
        TranscriptBatch(ids, np.array([len(u.transcript) for u in utts])),
    )


def make_batches(utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator | None = None):
    """Bucket utterances by length into padded batches.

    With ``rng`` the tie order and the batch order are shuffled; without it
    the bucketing is fully deterministic.
    """
    n = len(utts)
    jitter = rng.random(n) if rng is not None else np.arange(n) / max(n, 1)
    order = sorted(range(n), key=lambda i: (utts[i].features.shape[0], jitter[i]))
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    return [[utts[i] for i in c] for c in chunks]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a toy corpus with additive speaker and environment nuisances."""

    alphabet_size: int = 8
    feat_dim: int = 16
    frames_per_char: int = 3
    n_speakers: int = 4
    offset_scale: float = 0.3
    n_envs: int = 2
    noise_scale: float = 0.1
    min_len: int = 3
    max_len: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("alphabet_size", "feat_dim", "frames_per_char", "n_speakers", "n_envs", "min_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthSpec.{name} must be >= 1")
        if self.offset_scale < 0 or self.noise_scale < 0:
            raise ValueError("SynthSpec scales must be >= 0")
        if self.max_len < self.min_len:
            raise ValueError("SynthSpec.max_len < min_len")
        if self.alphabet_size > 26:
            raise ValueError("SynthSpec.alphabet_size is limited to 26 letters")

    @classmethod
    def from_json(cls, obj: dict) -> SynthSpec:
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(chr(ord("A") + i) for i in range(self.alphabet_size))


class SynthWorld:
    """The fixed random ingredients of a :class:`SynthSpec`: character
    templates, speaker offsets and environment noise colouring."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        self.templates = rng.standard_normal((spec.alphabet_size, spec.frames_per_char, spec.feat_dim))

    def speaker_offset(self, speaker: int) -> np.ndarray:
        rng = np.random.default_rng([self.spec.seed, 1, speaker])
        return self.spec.offset_scale * rng.standard_normal(self.spec.feat_dim)

    def env_gain(self, env: int) -> np.ndarray:
        rng = np.random.default_rng([self.spec.seed, 2, env])
        g = rng.gamma(1.0, 1.0, self.spec.feat_dim)
        return g / np.sqrt(np.mean(g * g))

    def render(self, chars: Sequence[int], speaker: int, env: int, rng: np.random.Generator) -> np.ndarray:
        """Features for a character-index sequence (indices into the alphabet)."""
        clean = np.concatenate([self.templates[c] for c in chars], axis=0)
        noise = rng.standard_normal(clean.shape) * self.env_gain(env) * self.spec.noise_scale
        x = clean + self.speaker_offset(speaker) + noise
        return x.astype(np.float32).astype(np.float64)


def synth_generate(spec: SynthSpec, n: int, rng: np.random.Generator, speakers: Sequence[int] | None = None,
                   prefix: str = "utt") -> list[Utterance]:
    """Draw ``n`` utterances.

    Speakers (default ``range(spec.n_speakers)``) and environments are
    assigned round-robin so every (speaker, env) cell is balanced.
    """
    if n < 1:
        raise ValueError("synth_generate needs n >= 1")
    world = SynthWorld(spec)
    vocab = spec.vocabulary()
    speakers = list(range(spec.n_speakers)) if speakers is None else list(speakers)
    out = []
    for i in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        chars = rng.integers(0, spec.alphabet_size, size=length)
        spk = speakers[i % len(speakers)]
        env = (i // len(speakers)) % spec.n_envs
        feats = world.render(chars, spk, env, rng)
        text = "".join(vocab.chars[c] for c in chars)
        out.append(Utterance(f"{prefix}{i:05d}", feats, vocab.encode(text), spk, env))
    return out


def generate_splits(spec: SynthSpec, n_train: int, n_dev: int, n_test: int,
                    rng: np.random.Generator) -> dict[str, list[Utterance]]:
    """Train/dev/test corpora whose speaker sets are disjoint.

    Each split gets ``spec.n_speakers`` fresh speakers; environments are
    shared.
    """
    k = spec.n_speakers
    return {
        name: synth_generate(spec, n, rng, speakers=range(j * k, (j + 1) * k), prefix=f"{name}_")
        for j, (name, n) in enumerate((("train", n_train), ("dev", n_dev), ("test", n_test)))
    }


def stratified_split(labels: Sequence[int], frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Indices for a ``frac``/``1-frac`` split drawn per class.

    Every class with at least two members keeps one on each side.
    """
    labels = np.asarray(labels)
    train, test = [], []
    for z in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == z))
        k = int(round(frac * len(idx)))
        if len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        train.extend(idx[:k])
        test.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(test, dtype=int))


# ---------------------------------------------------------------------------
# audio front end
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters spanning 0..Nyquist; returns (weights [n_mels, n_fft//2+1], centres in Hz)."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down)), edges[1:-1]


def logmel_extract(pcm: np.ndarray, sample_rate: int, n_mels: int = 40, frame_ms: float = 25.0,
                   hop_ms: float = 10.0) -> np.ndarray:
    """Log Mel filterbank features ``[T, n_mels]`` from 16-bit mono samples."""
    if sample_rate < 8000:
        raise ValueError(f"sample rate {sample_rate} Hz is below 8000")
    if n_mels not in (40, 80):
        raise ValueError(f"n_mels must be 40 or 80, got {n_mels}")
    x = np.asarray(pcm, dtype=np.float64)
    frame_len = int(round(sample_rate * frame_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if x.ndim != 1 or len(x) < frame_len:
        raise ValueError(f"audio of {len(x)} samples is shorter than one {frame_len}-sample frame")
    x = np.append(x[0], x[1:] - 0.97 * x[:-1])
    n_frames = 1 + (len(x) - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    n_fft = 1 << (frame_len - 1).bit_length()
    spec = np.abs(np.fft.rfft(frames * get_window("hann", frame_len), n=n_fft))
    fb, _ = mel_filterbank(n_mels, n_fft, sample_rate)
    return np.log(np.maximum(spec @ fb.T, 1e-10))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Samples and rate of a RIFF PCM 16-bit mono file."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getcomptype() != "NONE":
                raise FormatError(f"{path}: only 16-bit mono PCM WAV is supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: {e}") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.int16), rate


def write_wav(path, pcm: np.ndarray, sample_rate: int) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(np.asarray(pcm, dtype="<i2").tobytes())


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    rows, cols = feats.shape
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[: len(FEAT_MAGIC)] != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    head = len(FEAT_MAGIC) + 8
    if len(blob) < head:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", blob[len(FEAT_MAGIC) : head])
    if len(blob) != head + 4 * rows * cols:
        raise FormatError(f"{path}: payload holds {len(blob) - head} bytes, expected {4 * rows * cols}")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(rows, cols).astype(np.float64)


def write_corpus(directory, utts: Sequence[Utterance], vocab: Vocabulary, manifest: str = "manifest.jsonl") -> Path:
    """Write feature files under ``directory/feats`` and a JSON-lines manifest."""
    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        rel = f"feats/{u.id}.feat"
        write_features(directory / rel, u.features)
        rec = {"id": u.id, "feat_path": rel, "transcript": vocab.decode(u.transcript),
               "speaker": u.speaker, "env": u.env}
        lines.append(json.dumps(rec))
    path = directory / manifest
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_corpus(manifest_path, vocab: Vocabulary) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest {manifest_path} does not exist")
    out = []
    for n, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            feat_path = manifest_path.parent / rec["feat_path"]
            uid, text = rec["id"], rec["transcript"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"{manifest_path}:{n}: bad manifest record ({e})") from e
        if not feat_path.exists():
            raise FileNotFoundError(f"{manifest_path}:{n}: missing feature file {feat_path}")
        out.append(Utterance(uid, read_features(feat_path), vocab.encode(text), rec.get("speaker"), rec.get("env")))
    return out


def corpus_stats(utts: Sequence[Utterance]) -> dict:
    frames = [u.features.shape[0] for u in utts]
    return {
        "utterances": len(utts),
        "frames": int(np.sum(frames)) if frames else 0,
        "speakers": sorted({u.speaker for u in utts if u.speaker is not None}),
        "envs": sorted({u.env for u in utts if u.env is not None}),
    }
