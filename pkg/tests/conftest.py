import numpy as np
import pytest

from niesr.data import SynthSpec, synth_generate


@pytest.fixture(scope="session")
def tiny_spec():
    return SynthSpec(alphabet_size=4, feat_dim=6, frames_per_char=2, min_len=2, max_len=3)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return synth_generate(tiny_spec, 8, np.random.default_rng(3))


@pytest.fixture(scope="session")
def tiny_vocab(tiny_spec):
    return tiny_spec.vocabulary()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
