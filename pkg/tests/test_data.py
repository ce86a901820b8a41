import json
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from niesr.data import (
    EOS,
    FEAT_MAGIC,
    FormatError,
    SynthSpec,
    SynthWorld,
    Utterance,
    Vocabulary,
    batch_pad,
    corpus_stats,
    generate_splits,
    hz_to_mel,
    logmel_extract,
    make_batches,
    mel_filterbank,
    mel_to_hz,
    read_corpus,
    read_features,
    read_wav,
    stratified_split,
    synth_generate,
    write_corpus,
    write_features,
    write_wav,
)


def test_vocab_encode_uppercases_and_appends_eos():
    v = Vocabulary("AB C")
    assert v.encode("ab c") == [3, 4, 5, 6, EOS]
    assert v.decode(v.encode("cab")) == "CAB"
    assert len(v) == 7


def test_vocab_unknown_char_is_named():
    with pytest.raises(ValueError, match="'Z'"):
        Vocabulary("AB").encode("AZ")


def test_vocab_save_load(tmp_path):
    v = Vocabulary("XYZ")
    v.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json") == v
    assert json.loads((tmp_path / "v.json").read_text()) == {"chars": "XYZ"}


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="ABCDEF", min_size=1, max_size=20))
def test_vocab_roundtrip_property(text):
    v = Vocabulary("ABCDEF")
    assert v.decode(v.encode(text)) == text


def test_feat_byte_layout(tmp_path):
    feats = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_features(tmp_path / "a.feat", feats)
    blob = (tmp_path / "a.feat").read_bytes()
    assert len(blob) == 38
    assert blob[:6] == FEAT_MAGIC
    assert struct.unpack("<II", blob[6:14]) == (2, 3)
    assert struct.unpack("<6f", blob[14:]) == tuple(range(6))


def test_feat_roundtrip_bitwise(tmp_path, tiny_corpus):
    for u in tiny_corpus:
        write_features(tmp_path / "x.feat", u.features)
        back = read_features(tmp_path / "x.feat")
        assert back.tobytes() == u.features.tobytes()


def test_feat_bad_magic_and_truncation(tmp_path):
    (tmp_path / "bad.feat").write_bytes(b"NOPE00" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        read_features(tmp_path / "bad.feat")
    write_features(tmp_path / "t.feat", np.ones((2, 2)))
    blob = (tmp_path / "t.feat").read_bytes()
    (tmp_path / "t.feat").write_bytes(blob[:-1])
    with pytest.raises(FormatError):
        read_features(tmp_path / "t.feat")


def test_corpus_roundtrip(tmp_path, tiny_corpus, tiny_vocab):
    write_corpus(tmp_path, tiny_corpus, tiny_vocab)
    back = read_corpus(tmp_path / "manifest.jsonl", tiny_vocab)
    for a, b in zip(tiny_corpus, back):
        assert (a.id, a.transcript, a.speaker, a.env) == (b.id, b.transcript, b.speaker, b.env)
        assert a.features.tobytes() == b.features.tobytes()
    rec = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"id", "feat_path", "transcript", "speaker", "env"}


def test_corpus_bad_record(tmp_path, tiny_vocab):
    (tmp_path / "m.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(FormatError, match="m.jsonl:1"):
        read_corpus(tmp_path / "m.jsonl", tiny_vocab)


def test_utterance_validation():
    with pytest.raises(ValueError):
        Utterance("x", np.zeros((0, 3)), [EOS])
    with pytest.raises(ValueError):
        Utterance("x", np.zeros((2, 3)), [])


def test_batch_pad_and_masks(tiny_corpus):
    x, y = batch_pad(tiny_corpus[:3])
    assert x.features.shape[0] == 3
    for i, u in enumerate(tiny_corpus[:3]):
        T = u.features.shape[0]
        np.testing.assert_array_equal(x.features[i, :T], u.features)
        assert (x.features[i, T:] == 0).all()
        assert x.mask[i].sum() == T and y.mask[i].sum() == len(u.transcript)


def test_make_batches_covers_everything_once(tiny_corpus):
    for rng in (None, np.random.default_rng(0)):
        batches = make_batches(tiny_corpus, 3, rng)
        ids = sorted(u.id for b in batches for u in b)
        assert ids == sorted(u.id for u in tiny_corpus)
        assert all(len(b) <= 3 for b in batches)


def test_synth_is_deterministic_and_balanced(tiny_spec):
    a = synth_generate(tiny_spec, 16, np.random.default_rng(5))
    b = synth_generate(tiny_spec, 16, np.random.default_rng(5))
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a, b))
    cells = {(u.speaker, u.env) for u in a}
    assert len(cells) == tiny_spec.n_speakers * tiny_spec.n_envs
    assert all(u.features.shape[0] == tiny_spec.frames_per_char * (len(u.transcript) - 1) for u in a)


def test_speaker_offset_is_the_only_speaker_effect():
    spec = SynthSpec(noise_scale=0.0)
    w = SynthWorld(spec)
    rng = np.random.default_rng(0)
    d = w.render([0, 1], 1, 0, rng) - w.render([0, 1], 0, 0, rng)
    np.testing.assert_allclose(d, np.tile(w.speaker_offset(1) - w.speaker_offset(0), (6, 1)), atol=1e-6)


def test_splits_have_disjoint_speakers(tiny_spec):
    s = generate_splits(tiny_spec, 8, 4, 4, np.random.default_rng(0))
    spk = {k: set(corpus_stats(v)["speakers"]) for k, v in s.items()}
    assert not (spk["train"] & spk["dev"]) and not (spk["train"] & spk["test"]) and not (spk["dev"] & spk["test"])


def test_stratified_split_keeps_class_ratio():
    labels = np.repeat([0, 1, 2], 10)
    tr, te = stratified_split(labels, 0.8, np.random.default_rng(0))
    assert len(set(tr) & set(te)) == 0 and len(tr) + len(te) == 30
    assert np.bincount(labels[te]).tolist() == [2, 2, 2]


# --- audio front end -------------------------------------------------------


def test_mel_scale_roundtrip():
    f = np.array([0.0, 440.0, 1000.0, 7999.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f)
    assert abs(hz_to_mel(1000.0) - 1000.0) < 0.5


def test_logmel_frame_count_and_shape():
    pcm = np.zeros(16000, dtype=np.int16)
    out = logmel_extract(pcm, 16000, 40)
    assert out.shape == (98, 40)
    assert logmel_extract(pcm, 16000, 80).shape == (98, 80)


def test_logmel_tone_peaks_at_its_frequency():
    t = np.arange(16000) / 16000
    pcm = (8000 * np.sin(2 * np.pi * 1000 * t)).astype(np.int16)
    feats = logmel_extract(pcm, 16000, 40)
    _, centres = mel_filterbank(40, 512, 16000)
    peak = int(np.bincount(feats.argmax(axis=1)).argmax())
    assert abs(centres[peak] - 1000) == np.min(np.abs(centres - 1000))


def test_logmel_rejects_bad_input():
    with pytest.raises(ValueError):
        logmel_extract(np.zeros(100, dtype=np.int16), 16000)
    with pytest.raises(ValueError):
        logmel_extract(np.zeros(16000, dtype=np.int16), 16000, n_mels=64)
    with pytest.raises(ValueError):
        logmel_extract(np.zeros(16000, dtype=np.int16), 4000)


def test_wav_roundtrip_and_rejects_stereo(tmp_path):
    pcm = (np.arange(100) * 10).astype(np.int16)
    write_wav(tmp_path / "a.wav", pcm, 16000)
    back, rate = read_wav(tmp_path / "a.wav")
    assert rate == 16000 and np.array_equal(back, pcm)
    with wave.open(str(tmp_path / "s.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(bytes(8))
    with pytest.raises(FormatError):
        read_wav(tmp_path / "s.wav")


def test_stratified_split_holds_out_one_per_small_class():
    labels = np.array([0, 0, 1, 1, 2])
    tr, te = stratified_split(labels, 0.8, np.random.default_rng(0))
    assert sorted(labels[te].tolist()) == [0, 1]
    assert 4 in tr


# --- small worked examples -------------------------------------------------


def test_vocab_empty_and_abc_examples():
    v = Vocabulary("ABC")
    assert v.encode("") == [EOS]
    assert v.decode(v.encode("abc")) == "ABC"
    with pytest.raises(ValueError):
        v.encode("é")


def test_noise_free_same_transcript_is_identical():
    w = SynthWorld(SynthSpec(noise_scale=0.0, offset_scale=0.0))
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(w.render([2, 0, 1], 0, 0, rng), w.render([2, 0, 1], 3, 1, rng))


def test_frame_mean_difference_is_offset_difference():
    # features are stored as float32, so agreement is to float32 precision
    w = SynthWorld(SynthSpec(noise_scale=0.0, offset_scale=2.0))
    rng = np.random.default_rng(0)
    d = (w.render([1, 3], 2, 0, rng) - w.render([1, 3], 1, 0, rng)).mean(axis=0)
    np.testing.assert_allclose(d, w.speaker_offset(2) - w.speaker_offset(1), atol=1e-6)


def test_frame_mean_linearly_predicts_speaker():
    spec = SynthSpec(offset_scale=1.0, noise_scale=0.1)
    utts = synth_generate(spec, 400, np.random.default_rng(1))
    X = np.stack([np.append(u.features.mean(axis=0), 1.0) for u in utts])
    z = np.array([u.speaker for u in utts])
    tr, te = stratified_split(z, 0.8, np.random.default_rng(0))
    W, *_ = np.linalg.lstsq(X[tr], np.eye(spec.n_speakers)[z[tr]], rcond=None)
    assert ((X[te] @ W).argmax(axis=1) == z[te]).mean() > 0.95


def test_single_and_uneven_batches():
    u3 = Utterance("a", np.ones((3, 2)), [3, EOS], 0, 0)
    u5 = Utterance("b", np.ones((5, 2)), [4, 3, EOS], 1, 0)
    x, _ = batch_pad([u3])
    assert x.features.shape == (1, 3, 2) and x.lengths.tolist() == [3]
    x, _ = batch_pad([u3, u5])
    assert x.features.shape[1] == 5
    assert (x.features[0, 3:] == 0).all() and x.lengths.tolist() == [3, 5]


def test_logmel_silence_is_floor():
    out = logmel_extract(np.zeros(4000), 16000)
    assert (out == np.log(1e-10)).all()


def test_logmel_amplitude_scaling_shifts_log_energy():
    rng = np.random.default_rng(2)
    pcm = rng.standard_normal(8000) * 1000.0
    a, b = logmel_extract(pcm, 16000), logmel_extract(10.0 * pcm, 16000)
    live = a > np.log(1e-10) + 10
    np.testing.assert_allclose((b - a)[live], np.log(10.0), atol=1e-6)
