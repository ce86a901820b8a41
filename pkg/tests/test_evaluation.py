import functools
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from niesr.evaluation import (
    ProbeConfig,
    cer,
    corpus_cer,
    levenshtein,
    macro_cer,
    micro_cer,
    probe_model,
    probe_train_eval,
    relative_improvement,
    report,
    write_report,
)
from niesr.models import build_model, snapshot

from test_models import micro_cfg

GOLDEN = Path(__file__).parent / "golden"


def naive_distance(a, b):
    @functools.lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


@pytest.mark.parametrize("a,b,d", [("", "", 0), ("ABC", "", 3), ("", "AB", 2), ("KITTEN", "SITTING", 3),
                                   ("ABC", "ABC", 0), ("ABC", "CBA", 2)])
def test_levenshtein_known_values(a, b, d):
    assert levenshtein(a, b) == d


@settings(max_examples=100, deadline=None)
@given(st.text("ABC", max_size=8), st.text("ABC", max_size=8))
def test_levenshtein_matches_recursive_definition(a, b):
    assert levenshtein(a, b) == naive_distance(a, b) == levenshtein(b, a)


@settings(max_examples=50, deadline=None)
@given(st.text("AB", max_size=6), st.text("AB", max_size=6), st.text("AB", max_size=6))
def test_levenshtein_triangle_inequality(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_cer_can_exceed_one_and_needs_reference():
    assert cer("AB", "XYZW") == 2.0
    with pytest.raises(ValueError):
        cer("", "A")


def test_micro_versus_macro():
    refs, hyps = ["A", "ABCD"], ["B", "ABCD"]
    assert micro_cer(refs, hyps) == pytest.approx(1 / 5)
    assert macro_cer(refs, hyps) == pytest.approx(0.5)


def test_relative_improvement_published_example():
    assert round(100 * relative_improvement(12.95, 12.24), 2) == 5.48
    with pytest.raises(ValueError):
        relative_improvement(0.0, 1.0)


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(target="dialect")
    with pytest.raises(ValueError):
        ProbeConfig(source="h3")


def test_probe_reads_separable_labels():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1, 2, 3], 20)
    centres = rng.standard_normal((4, 5)) * 3
    embs = [centres[z] + 0.1 * rng.standard_normal((int(rng.integers(2, 6)), 5)) for z in labels]
    assert probe_train_eval(embs, labels, ProbeConfig(epochs=40)) >= 0.9


def test_probe_is_near_chance_without_signal():
    rng = np.random.default_rng(1)
    labels = np.repeat([0, 1, 2, 3], 20)
    embs = [rng.standard_normal((3, 5)) for _ in labels]
    assert probe_train_eval(embs, labels, ProbeConfig(epochs=20)) <= 0.6


def test_probe_needs_two_classes():
    with pytest.raises(ValueError):
        probe_train_eval([np.zeros((2, 2))] * 4, [0, 0, 0, 0], ProbeConfig(), (np.arange(3), np.arange(3, 4)))


RUNS = [
    {"name": "base", "cer": 0.1295, "probes": {"speaker": {"h": 0.6791}, "env": {"h": 0.51}}},
    {"name": "niesr", "cer": 0.1224, "rel_improvement": relative_improvement(0.1295, 0.1224),
     "probes": {"speaker": {"h1": 0.6335, "h2": 0.9792}}},
]


def test_report_matches_golden(tmp_path):
    text, obj = report(RUNS)
    assert text == (GOLDEN / "report.txt").read_text()
    write_report(tmp_path / "r.json", RUNS)
    assert json.loads((tmp_path / "r.json").read_text()) == obj
    assert (tmp_path / "r.json").read_text() == (GOLDEN / "report.json").read_text()


def test_report_needs_name_and_cer():
    with pytest.raises(KeyError):
        report([{"name": "x"}])


def test_corpus_cer_rejects_empty(tiny_vocab):
    with pytest.raises(ValueError):
        corpus_cer(None, [], tiny_vocab)


def test_cer_worked_examples():
    assert cer("ABC", "ABC") == 0.0
    assert cer("AB", "") == 1.0
    assert cer("SITTING", "KITTEN") == pytest.approx(3 / 7)
    assert micro_cer(["AB", "C"], ["AB", "C"]) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.text("ABCD", min_size=1, max_size=8), st.text("ABCD", max_size=8), st.permutations("ABCD"))
def test_cer_invariant_to_relabelling(ref, hyp, perm):
    table = str.maketrans("ABCD", "".join(perm))
    assert cer(ref, hyp) == cer(ref.translate(table), hyp.translate(table))


def test_probe_on_noise_sits_in_chance_band():
    rng = np.random.default_rng(4)
    labels = np.repeat([0, 1, 2, 3], 100)
    embs = [rng.standard_normal((3, 5)) for _ in labels]
    assert abs(probe_train_eval(embs, labels, ProbeConfig(epochs=5)) - 0.25) <= 0.08


def test_probe_on_shuffled_labels_sits_in_chance_band():
    """Leak detector: informative embeddings, labels permuted."""
    rng = np.random.default_rng(8)
    labels = np.repeat([0, 1, 2, 3], 100)
    embs = [np.tile(np.eye(4)[z], (3, 1)) + 0.1 * rng.standard_normal((3, 4)) for z in labels]
    shuffled = rng.permutation(labels)
    acc = probe_train_eval(embs, shuffled, ProbeConfig(epochs=5))
    sigma = np.sqrt(0.25 * 0.75 / 80)
    assert abs(acc - 0.25) <= 3 * sigma


def test_probe_does_not_touch_the_model(tiny_corpus, tiny_vocab):
    m = build_model("niesr", micro_cfg(len(tiny_vocab)), np.random.default_rng(0))
    before = snapshot(m)
    probe_model(m, tiny_corpus, ProbeConfig(source="h2", epochs=2))
    after = snapshot(m)
    assert before.keys() == after.keys()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
