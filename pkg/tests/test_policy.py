import math

import numpy as np
import pytest

from toolevolve.errors import EmptyMask, ShapeMismatch, TokenOutOfVocab
from toolevolve.optimize import finite_diff_gradient
from toolevolve.policy import (
    FeatureLayout,
    PolicyParameters,
    TokenBatch,
    Vocabulary,
    load_params,
    log_softmax_matrix,
    params_from_bytes,
    params_to_bytes,
    sample_action,
    save_params,
    score_tokens,
    sft_loss,
)

from conftest import rel_err, small_params


def _batch(params, T=5, seed=0):
    rng = np.random.default_rng(seed)
    ctx = np.zeros((T, params.layout.width))
    ctx[:, : params.layout.n_hist] = rng.standard_normal((T, params.layout.n_hist))
    return TokenBatch(ctx, rng.integers(0, params.vocab_size, T), np.ones(T))


def test_uniform_params_give_log_v():
    layout = FeatureLayout(8, 8, 2)
    params = PolicyParameters(np.zeros((8, layout.width)), layout)
    lp = score_tokens(params, _batch(params))
    assert np.allclose(lp, -math.log(8), atol=1e-12)


def test_high_temperature_limit():
    p = small_params(1)
    hot = PolicyParameters(p.weights, p.layout, temperature=1e9)
    assert np.allclose(score_tokens(hot, _batch(p)), -math.log(p.vocab_size), atol=1e-6)


def test_rows_normalised():
    p = small_params(2)
    lp = log_softmax_matrix(p, _batch(p).contexts)
    assert np.allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)


def test_score_tokens_pure():
    p = small_params(3)
    b = _batch(p)
    assert np.array_equal(score_tokens(p, b), score_tokens(p, b))


def test_token_out_of_vocab():
    p = small_params(4)
    b = _batch(p)
    b.tokens[0] = p.vocab_size
    with pytest.raises(TokenOutOfVocab):
        score_tokens(p, b)
    with pytest.raises(TokenOutOfVocab):
        Vocabulary(["a"]).id("b")


def test_shape_checks():
    layout = FeatureLayout(8, 8, 2)
    with pytest.raises(ShapeMismatch):
        PolicyParameters(np.zeros((8, 3)), layout)
    with pytest.raises(ShapeMismatch):
        TokenBatch(np.zeros((2, 4)), [0], [1])


def test_context_sensitivity():
    p = PolicyParameters.initialize(FeatureLayout(10, 8, 2), seed=0)
    plain = p.layout.plain_features(["req:flag"])
    patched = plain.copy()
    patched[p.layout.n_hist:] = p.layout.guidance_block({3: 1.0}, ["flag"])
    lp_plain = score_tokens(p, TokenBatch(plain, [3], [1]))
    lp_patched = score_tokens(p, TokenBatch(patched, [3], [1]))
    assert lp_patched[0] > lp_plain[0]


def test_sample_degenerate_logits():
    layout = FeatureLayout(8, 8, 2)
    w = np.zeros((8, layout.width))
    w[5, 0] = 50.0
    p = PolicyParameters(w, layout, temperature=1.0)
    x = layout.plain_features([])
    rng = np.random.default_rng(0)
    assert all(sample_action(p, x, rng)[0] == 5 for _ in range(100))


def test_sample_reproducible_and_consistent():
    p = small_params(5)
    x = _batch(p).contexts[0]
    a = sample_action(p, x, np.random.default_rng(7))
    b = sample_action(p, x, np.random.default_rng(7))
    assert a == b
    assert a[1] == pytest.approx(float(score_tokens(p, TokenBatch(x, [a[0]], [1]))[0]), abs=1e-12)


def test_sample_respects_legal_mask():
    p = small_params(6)
    x = _batch(p).contexts[0]
    legal = np.zeros(p.vocab_size, bool)
    legal[[2, 7]] = True
    rng = np.random.default_rng(0)
    assert {sample_action(p, x, rng, legal)[0] for _ in range(200)} <= {2, 7}


def test_sample_rejects_patched_context():
    p = small_params(7)
    x = np.zeros(p.layout.width)
    x[p.layout.header_col] = 1.0
    with pytest.raises(ValueError):
        sample_action(p, x, np.random.default_rng(0))


def test_sampling_frequencies_match_softmax():
    p = small_params(8, V=8, scale=0.5)
    x = _batch(p).contexts[0]
    probs = np.exp(log_softmax_matrix(p, x[None, :])[0])
    rng = np.random.default_rng(11)
    n = 100_000
    counts = np.bincount([sample_action(p, x, rng)[0] for _ in range(n)], minlength=8)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 3 * sigma + 1)


def test_sft_loss_half_probability():
    layout = FeatureLayout(8, 8, 2)
    w = np.zeros((8, layout.width))
    # logit of token 0 equals log(7) so p = 7 / 14 = 0.5
    w[0, 0] = math.log(7.0)
    p = PolicyParameters(w, layout, temperature=1.0)
    loss, _ = sft_loss(p, TokenBatch(layout.plain_features([]), [0], [1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_sft_loss_empty_mask():
    p = small_params(9)
    b = _batch(p)
    b.mask[:] = 0
    with pytest.raises(EmptyMask):
        sft_loss(p, b)


def test_sft_loss_duplicate_rows_invariant():
    p = small_params(10)
    b = _batch(p)
    dup = TokenBatch(np.vstack([b.contexts, b.contexts]), np.concatenate([b.tokens, b.tokens]),
                     np.concatenate([b.mask, b.mask]))
    assert sft_loss(p, b)[0] == pytest.approx(sft_loss(p, dup)[0], abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_sft_gradient_matches_fd(seed):
    p = small_params(seed, V=int(8 + seed % 9))
    b = _batch(p, T=6, seed=seed)
    b.mask[0] = 0
    _, grad = sft_loss(p, b)
    fd = finite_diff_gradient(lambda q: sft_loss(q, b)[0], p, 1e-5)
    assert rel_err(grad, fd) < 1e-5


def test_checkpoint_round_trip(tmp_path):
    p = small_params(11)
    blob = params_to_bytes(p)
    q = params_from_bytes(blob)
    assert np.array_equal(p.weights, q.weights) and q.layout == p.layout and q.temperature == p.temperature
    path = tmp_path / "w.bin"
    save_params(str(path), p)
    assert path.read_bytes() == blob
    assert np.array_equal(load_params(str(path)).weights, p.weights)
    with pytest.raises(ValueError):
        params_from_bytes(b"XXXXXXXX" + blob[8:])


def test_layout_strip_restores_plain():
    layout = FeatureLayout(10, 8, 3)
    plain = layout.plain_features(["a", "b"])
    patched = plain.copy()
    patched[layout.n_hist:] = layout.guidance_block({1: -1.0}, ["x"])
    assert layout.is_patched(patched) and not layout.is_patched(plain)
    assert np.array_equal(layout.strip(patched), plain)
