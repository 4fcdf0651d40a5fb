import math

import numpy as np
import pytest

from anchored_absa import abae
from anchored_absa.abae import (
    AbaeHyper,
    AbaeParams,
    EmptySentenceError,
    TrainingDivergedError,
    aspect_probs,
    attention,
    batch_loss_and_grad,
    forward,
    hinge_loss,
    infer,
    kmeans,
    load_model,
    negative_samples,
    ortho_penalty,
    pad_batch,
    predict,
    reconstruct,
    save_model,
    sentence_average,
    top_words,
    total_loss,
    train,
    weighted_embedding,
)
from anchored_absa.numerics import grad_check, make_rng

from conftest import toy_embeddings

E2 = np.array([[1.0, 0.0], [0.0, 1.0], [4.0, 0.0], [0.0, 4.0]])


class TestForwardOps:
    def test_sentence_average(self):
        np.testing.assert_array_equal(sentence_average([2], E2), [4.0, 0.0])
        np.testing.assert_array_equal(sentence_average([0, 1], E2), [0.5, 0.5])
        np.testing.assert_array_equal(sentence_average([1, 0, 2], E2), sentence_average([2, 1, 0], E2))
        with pytest.raises(EmptySentenceError):
            sentence_average([], E2)

    def test_attention(self):
        np.testing.assert_allclose(attention([2, 2, 2], E2, np.eye(2)), [1 / 3] * 3)
        np.testing.assert_allclose(attention([0, 2, 3], E2, np.zeros((2, 2))), [1 / 3] * 3)
        np.testing.assert_allclose(attention([0, 1], E2, np.eye(2)), [0.5, 0.5])
        with pytest.raises(EmptySentenceError):
            attention([], E2, np.eye(2))

    def test_bounded_attention_squashes_logits(self):
        a = attention([2, 3, 3], E2, np.eye(2) * 100, bounded=True)
        logits = np.tanh(np.array([4 * 4 / 3, 8 * 4 / 3, 8 * 4 / 3]) * 100)
        np.testing.assert_allclose(a, np.exp(logits) / np.exp(logits).sum())

    def test_weighted_embedding(self):
        np.testing.assert_array_equal(weighted_embedding([0, 3], [0, 1], E2), E2[3])
        np.testing.assert_allclose(weighted_embedding([0, 1, 2], [1 / 3] * 3, E2), sentence_average([0, 1, 2], E2))
        np.testing.assert_allclose(weighted_embedding([2, 3], [0.25, 0.75], E2), [1.0, 3.0])
        with pytest.raises(ValueError):
            weighted_embedding([2, 3], [1.0], E2)

    def test_aspect_probs(self):
        np.testing.assert_allclose(aspect_probs([1, 2], np.zeros((4, 2)), np.zeros(4)), [0.25] * 4)
        np.testing.assert_allclose(aspect_probs([1, 2], np.zeros((2, 2)), np.array([10.0, -10.0])), [1, 0], atol=1e-8)
        np.testing.assert_allclose(
            aspect_probs([1.0, 0.0], np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2)), [0.7311, 0.2689], atol=1e-4
        )
        with pytest.raises(ValueError):
            aspect_probs([1, 2, 3], np.zeros((2, 2)), np.zeros(2))

    def test_reconstruct(self):
        T = np.array([[2.0, 0.0], [0.0, 2.0]])
        np.testing.assert_array_equal(reconstruct([0, 1], T), [0, 2])
        np.testing.assert_allclose(reconstruct([0.5, 0.5], T), [1, 1])
        np.testing.assert_allclose(reconstruct([0.1, 0.9], T), [0.2, 1.8])
        with pytest.raises(ValueError):
            reconstruct([1.0], T)

    def test_forward_probabilities(self):
        rng = make_rng(1)
        E = rng.normal(size=(10, 6))
        params = AbaeParams(rng.normal(size=(3, 6)), rng.normal(size=(6, 6)), rng.normal(size=(3, 6)), rng.normal(size=3))
        for ids in ([1], [2, 3, 4], [9, 9, 0, 5, 7]):
            for bounded in (False, True):
                tr = forward(ids, params, E, bounded)
                assert abs(tr.a.sum() - 1) < 1e-10 and np.all(tr.a >= 0)
                assert abs(tr.p_t.sum() - 1) < 1e-10 and np.all(tr.p_t >= 0)
                np.testing.assert_allclose(tr.r_s, params.T.T @ tr.p_t)


class TestLosses:
    def test_hinge(self):
        r = np.array([1.0, 0.0])
        assert hinge_loss(r, [1.0, 0.0], [[0.0, 1.0], [0.0, -1.0]]) == 0.0
        assert hinge_loss(r, [0.0, 1.0], [[0.0, 1.0]]) == 1.0
        assert hinge_loss(r, [0.5, 0.0], [[0.2, 0.0], [-0.3, 0.0]]) == pytest.approx(0.9)

    def test_ortho(self):
        assert ortho_penalty(np.eye(3)) == 0.0
        Q, _ = np.linalg.qr(make_rng(2).normal(size=(5, 5)))
        assert ortho_penalty(Q[:3]) == pytest.approx(0.0, abs=1e-12)
        assert ortho_penalty(np.array([[0.6, 0.8], [0.6, 0.8]])) == pytest.approx(math.sqrt(2))
        assert ortho_penalty(np.array([[0.6, 0.8], [0.6, 0.8]])) == pytest.approx(1.41421, abs=1e-5)
        T = make_rng(3).normal(size=(4, 6))
        T5 = T.copy()
        T5[2] *= 5
        assert ortho_penalty(T5) == pytest.approx(ortho_penalty(T), abs=1e-12)
        with pytest.raises(ValueError):
            ortho_penalty(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_ortho_exactly_zero_for_hand_built_orthonormal(self):
        T = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
        assert ortho_penalty(T) == 0.0

    def test_total(self):
        assert total_loss(2, 3, 1) == 5
        assert total_loss(2, 3, 1, K=123.0, sigma=0.0) == total_loss(2, 3, 1)
        assert total_loss(2, 3, 1, K=4, sigma=0.1) == pytest.approx(5.4)
        with pytest.raises(ValueError):
            total_loss(1, 1, -1)
        with pytest.raises(ValueError):
            total_loss(1, 1, 1, K=1, sigma=-0.1)


def random_instance(seed, d=8, k=3, max_len=5, m=2, max_batch=4, anchors=True):
    rng = make_rng(seed)
    V = 12
    E = rng.normal(size=(V, d))
    B = int(rng.integers(1, max_batch + 1))
    ids = [list(rng.integers(0, V, size=int(rng.integers(1, max_len + 1)))) for _ in range(B)]
    idx, mask = pad_batch(ids)
    X = E[idx] * mask[:, :, None]
    neg = rng.normal(size=(B, m, d))
    params = {
        "T": rng.normal(size=(k, d)),
        "M": rng.normal(size=(d, d)) * 0.3,
        "W": rng.normal(size=(k, d)),
        "b": rng.normal(size=k),
    }
    rows = rng.normal(size=(B, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    amask = (rng.random(B) < 0.7).astype(float) if anchors else None
    return params, X, mask, neg, rows, amask


@pytest.mark.parametrize("unit_vectors", [True, False])
@pytest.mark.parametrize("bounded", [True, False])
@pytest.mark.parametrize("sigma", [0.0, 0.1, 1.0])
def test_batch_gradients_match_finite_differences(unit_vectors, bounded, sigma):
    worst = 0.0
    for seed in range(5):
        params, X, mask, neg, rows, amask = random_instance(seed)

        def f(p):
            parts, g = batch_loss_and_grad(
                AbaeParams(p["T"], p["M"], p["W"], p["b"]), X, mask, neg, 1.0, unit_vectors, sigma, rows, amask, bounded
            )
            return parts.total, g

        worst = max(worst, grad_check(f, params, eps=1e-6))
    assert worst < 1e-4


def test_batch_loss_matches_per_sentence_ops():
    params, X, mask, neg, _, _ = random_instance(11)
    P = AbaeParams(**params)
    parts, _ = batch_loss_and_grad(P, X, mask, neg, 0.5, unit_vectors=False)
    J = 0.0
    for i in range(X.shape[0]):
        n = int(mask[i].sum())
        tr = forward(list(range(n)), P, X[i, :n])
        J += hinge_loss(tr.r_s, tr.z_s, neg[i])
    assert parts.J == pytest.approx(J, rel=1e-12)
    assert parts.total == pytest.approx(J + 0.5 * ortho_penalty(P.T), rel=1e-12)


def test_negative_samples():
    rng = make_rng(0)
    assert np.all(negative_samples([0, 1, 0], 2, 1, rng) == [[1], [0], [1]])
    draws = negative_samples(np.arange(50), 500, 20, make_rng(1))
    assert draws.shape == (50, 20)
    assert not np.any(draws == np.arange(50)[:, None])
    assert draws.min() >= 0 and draws.max() < 500
    np.testing.assert_array_equal(draws, negative_samples(np.arange(50), 500, 20, make_rng(1)))
    with pytest.raises(ValueError):
        negative_samples([0], 1, 1, rng)


def test_kmeans_recovers_separated_clusters():
    rng = make_rng(0)
    centres = np.array([[5.0, 0.0], [0.0, 5.0], [-5.0, -5.0]])
    X = np.concatenate([c + 0.1 * rng.normal(size=(30, 2)) for c in centres])
    C = kmeans(X, 3, restarts=3, seed=1)
    for c in centres:
        assert np.min(np.linalg.norm(C - c, axis=1)) < 0.2
    np.testing.assert_array_equal(C, kmeans(X, 3, restarts=3, seed=1))
    with pytest.raises(ValueError):
        kmeans(X[:2], 3)


def test_hyper_validation():
    for kw in ({"k": 1}, {"negatives": 0}, {"lam": -1}, {"sigma": -0.1}, {"epochs": 0}):
        with pytest.raises(ValueError):
            AbaeHyper(**kw)


def test_infer_ties_and_selection():
    E = np.eye(3)
    T = np.eye(3)
    P = AbaeParams(T, np.eye(3), np.zeros((3, 3)), np.zeros(3))
    assert infer([0], P, E)[0] == 0  # all equal, lowest index
    P.b[:] = [0, 0, 50]
    assert infer([1], P, E)[0] == 2
    P2 = AbaeParams(np.eye(2), np.eye(2), np.zeros((2, 2)), np.zeros(2))
    aspect, p = infer([0, 1], P2, np.eye(2))
    assert aspect == 0 and np.allclose(p, [0.5, 0.5])
    assert predict([[0], []], P, E) == [2, None]


def test_top_words():
    E = toy_embeddings({"pizza": [1.0, 0.1], "pasta": [0.9, 0.3], "waiter": [0.0, 1.0]})
    assert top_words(np.array([E["pizza"], E["waiter"]]), E, 2) == [["pizza", "pasta"], ["waiter", "pasta"]]
    assert top_words(np.array([E["pizza"]]), E, 0) == [[]]
    with pytest.raises(ValueError):
        top_words(np.array([E["pizza"]]), E, 4)


HYPER = dict(k=4, epochs=3, batch_size=20, negatives=5, kmeans_restarts=2, seed=3)


def test_training_is_deterministic_and_sigma0_matches_plain(small_synthetic):
    sents, _, E = small_synthetic
    sents = sents[:300]
    h = AbaeHyper(**HYPER)
    a = train(sents, E, h)
    b = train(sents, E, h)
    assert a.loss_history == b.loss_history
    assert save_model(a.params, h) == save_model(b.params, h)

    class Anchors:
        rows = np.tile(np.eye(E.dim)[0], (len(sents), 1))
        mask = np.ones(len(sents))
        sigma = 0.0

    c = train(sents, E, h, Anchors())
    assert c.loss_history == a.loss_history
    assert save_model(c.params, h) == save_model(a.params, h)


def test_training_reduces_loss_and_skips_empty(small_synthetic):
    sents, _, E = small_synthetic
    data = list(sents[:300]) + [()]
    res = train(data, E, AbaeHyper(**{**HYPER, "epochs": 5}))
    assert res.skipped == [300]
    assert res.loss_history[-1] < res.loss_history[0]
    assert E.vectors is small_synthetic[2].vectors


def test_divergence_reports_epoch_and_batch(small_synthetic, monkeypatch):
    sents, _, E = small_synthetic
    real = abae.batch_loss_and_grad
    calls = {"n": 0}

    def flaky(*args, **kw):
        parts, g = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 7:
            parts.total = float("nan")
        return parts, g

    monkeypatch.setattr(abae, "batch_loss_and_grad", flaky)
    with pytest.raises(TrainingDivergedError) as info:
        train(sents[:100], E, AbaeHyper(**HYPER))
    assert (info.value.epoch, info.value.batch) == (2, 2)


def test_model_round_trip_bit_exact():
    rng = make_rng(5)
    P = AbaeParams(rng.normal(size=(3, 4)), rng.normal(size=(4, 4)), rng.normal(size=(3, 4)), rng.normal(size=3))
    h = AbaeHyper(k=3, lam=2.5)
    data = save_model(P, h)
    P2, h2 = load_model(data)
    for name in ("T", "M", "W", "b"):
        assert getattr(P2, name).tobytes() == getattr(P, name).tobytes()
    assert h2 == h
    assert save_model(P2, h2) == data
    with pytest.raises(ValueError):
        load_model(data[:-8])
    with pytest.raises(ValueError):
        load_model(b"garbage")
    with pytest.raises(ValueError):
        load_model(data.replace(b'"version": 1', b'"version": 9'))


def test_params_shape_validation():
    with pytest.raises(ValueError):
        AbaeParams(np.zeros((3, 4)), np.eye(4), np.zeros((2, 4)), np.zeros(3))
