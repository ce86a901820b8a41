import numpy as np
import pytest

from niesr import tensor as T
from niesr.attention import (
    MASK_SENTINEL,
    AttentionParams,
    DecoderParams,
    attention_context,
    attention_energies,
    decoder_step,
    initial_state,
)
from niesr.tensor import ShapeError, Tensor, check_gradient


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def hand_energies(p, s, h, alpha):
    """Loop-by-frame reference for the energy formula."""
    L = h.shape[0]
    K = p.F.shape[0]
    Fk = np.vstack([p.F.data, np.zeros((1, p.F.shape[1]))]) if K % 2 == 0 else p.F.data
    half = Fk.shape[0] // 2
    out = np.zeros(L)
    for j in range(L):
        f = np.zeros(p.F.shape[1])
        for k in range(Fk.shape[0]):
            src = j + k - half
            if 0 <= src < L:
                f += alpha[src] * Fk[k]
        pre = p.W.data @ s + p.V.data @ h[j] + p.U.data @ f + p.b.data
        out[j] = p.w.data @ np.tanh(pre)
    return out


def test_energies_match_hand_loop(rng):
    p = AttentionParams(3, 4, 5, 2, 3, rng)
    s, h = rng.standard_normal(3), rng.standard_normal((6, 4))
    alpha = rng.dirichlet(np.ones(6))
    e = attention_energies(p, Tensor(s), Tensor(h), Tensor(alpha), np.ones(6, dtype=bool)).data
    np.testing.assert_allclose(e, hand_energies(p, s, h, alpha), atol=1e-12)


def test_masked_frames_get_sentinel_and_zero_weight(rng):
    p = AttentionParams(3, 4, 5, 2, 4, rng)
    h = Tensor(rng.standard_normal((2, 5, 4)))
    mask = np.array([[1, 1, 1, 0, 0], [1] * 5], dtype=bool)
    e = attention_energies(p, Tensor(rng.standard_normal((2, 3))), h, Tensor(np.full((2, 5), 0.2)), mask)
    assert (e.data[0, 3:] == MASK_SENTINEL).all()
    alpha, c = attention_context(e, h, mask)
    assert (alpha.data[0, 3:] == 0).all()
    np.testing.assert_allclose(alpha.data.sum(axis=1), 1.0)
    np.testing.assert_allclose(c.data, np.einsum("bl,ble->be", alpha.data, h.data))


def test_zero_frames_rejected(rng):
    p = AttentionParams(2, 2, 2, 1, 3, rng)
    with pytest.raises(ShapeError):
        attention_energies(p, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 0, 2))),
                           Tensor(np.zeros((1, 0))), np.zeros((1, 0), dtype=bool))


def test_decoder_step_outputs_distribution(rng):
    dec = DecoderParams(6, 4, 5, 3, 2, 3, rng)
    h = Tensor(rng.standard_normal((2, 4, 4)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
    st = initial_state(dec, h, mask)
    np.testing.assert_allclose(st.alpha.data[1], [0.5, 0.5, 0, 0])
    logp, st2 = decoder_step(dec, dec.embed[np.array([1, 1])], st, h, mask)
    np.testing.assert_allclose(np.exp(logp.data).sum(axis=1), 1.0)
    assert st2.alpha.shape == (2, 4) and (st2.alpha.data[1, 2:] == 0).all()


def test_decoder_three_steps_gradient(rng):
    dec = DecoderParams(5, 3, 4, 3, 2, 3, rng)
    h = Tensor(rng.standard_normal((2, 4, 3)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    ys = np.array([[1, 3, 4], [1, 2, 2]])
    targets = np.array([[3, 4, 2], [2, 2, 2]])

    def f():
        st = initial_state(dec, h, mask)
        total = None
        for i in range(3):
            logp, st = decoder_step(dec, dec.embed[ys[:, i]], st, h, mask)
            step = logp[np.arange(2), targets[:, i]].sum()
            total = step if total is None else total + step
        return total * -1.0

    assert check_gradient(f, [h] + dec.parameters()) < 1e-3


def test_attention_conv_path_gradient(rng):
    p = AttentionParams(2, 3, 4, 2, 4, rng)
    s, h, a = (Tensor(rng.standard_normal(sh)) for sh in ((2, 2), (2, 5, 3), (2, 5)))
    mask = np.ones((2, 5), dtype=bool)
    w = rng.standard_normal((2, 5))
    f = lambda: (T.softmax(attention_energies(p, s, h, a, mask)) * Tensor(w)).sum()  # noqa: E731
    assert check_gradient(f, [s, h, a] + p.parameters()) < 1e-6


# --- small worked examples -------------------------------------------------


def test_zero_parameters_give_zero_energies(rng):
    p = AttentionParams(3, 4, 5, 2, 3, rng)
    for q in p.parameters():
        q.data[...] = 0.0
    e = attention_energies(p, Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal((4, 4))),
                           Tensor(np.full(4, 0.25)), np.ones(4, dtype=bool)).data
    np.testing.assert_array_equal(e, 0.0)


def test_zero_scoring_vector_gives_zero_energies(rng):
    p = AttentionParams(3, 4, 5, 2, 3, rng)
    p.w.data[...] = 0.0
    e = attention_energies(p, Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal((4, 4))),
                           Tensor(np.full(4, 0.25)), np.ones(4, dtype=bool)).data
    np.testing.assert_array_equal(e, 0.0)


def test_equal_energies_split_attention_evenly():
    h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    alpha, c = attention_context(Tensor([0.7, 0.7]), h, np.ones(2, dtype=bool))
    np.testing.assert_allclose(alpha.data, [0.5, 0.5])
    np.testing.assert_allclose(c.data, [0.5, 0.5])


def test_single_unmasked_frame_takes_all_weight(rng):
    h = Tensor(rng.standard_normal((3, 2)))
    alpha, c = attention_context(Tensor(rng.standard_normal(3)), h, np.array([False, True, False]))
    np.testing.assert_array_equal(alpha.data, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(c.data, h.data[1])


def test_zero_decoder_gives_uniform_distribution(rng):
    dec = DecoderParams(6, 4, 5, 3, 2, 3, rng)
    for q in dec.parameters():
        q.data[...] = 0.0
    h = Tensor(rng.standard_normal((1, 3, 4)))
    mask = np.ones((1, 3), dtype=bool)
    logp, _ = decoder_step(dec, dec.embed[np.array([2])], initial_state(dec, h, mask), h, mask)
    np.testing.assert_allclose(np.exp(logp.data), 1.0 / 6)


def test_zero_location_filter_ignores_previous_alignment(rng):
    p = AttentionParams(3, 4, 5, 2, 3, rng)
    p.F.data[...] = 0.0
    s, h = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal((6, 4)))
    mask = np.ones(6, dtype=bool)
    a = attention_energies(p, s, h, Tensor(rng.dirichlet(np.ones(6))), mask).data
    b = attention_energies(p, s, h, Tensor(rng.dirichlet(np.ones(6))), mask).data
    np.testing.assert_array_equal(a, b)
