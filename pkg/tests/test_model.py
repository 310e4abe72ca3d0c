from __future__ import annotations

import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import gradient_draw, max_relative_error, numeric_gradient

from activeview.features import EncodingConfig, encode
from activeview.model import (MlpParameters, TrainConfig, backward, bce_term, bundle_from_bytes, bundle_to_bytes,
                              fit, forward, init_params, l2_term, load_bundle, loss, save_bundle, score_features,
                              score_viewpoint, train, zero_params)
from activeview.visibility import VisibilityRecord


def tiny_network() -> MlpParameters:
    return MlpParameters(np.array([[0.5], [-0.25]]), np.array([0.1]), np.array([[2.0]]), np.array([-0.2]),
                         np.array([[-1.5]]), np.array([0.25]))


def blobs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(float)
    X = rng.normal(0, 0.5, size=(n, 2)) + np.where(y[:, None] > 0, 2.0, -2.0)
    return X, y


def random_record(seed: int, n: int = 30) -> VisibilityRecord:
    rng = np.random.default_rng(seed)
    pix = rng.uniform((0, 0), (640, 480), size=(n, 2))
    pts = rng.uniform((-2, -2, 0.5), (2, 2, 6), size=(n, 3))
    return VisibilityRecord(0, 0, np.arange(n), pix, pts[:, 2], pts)


def small_bundle(seed=0, bins=6):
    enc = EncodingConfig(bins_u=bins, bins_v=bins)
    feats = [encode(random_record(seed * 100 + i), enc) for i in range(40)]
    labels = np.arange(40) % 2
    return train(feats, labels, TrainConfig(epochs=3, hidden=16, batch_size=16, seed=seed), enc)


class TestForward:
    def test_zero_parameters_give_half(self):
        assert forward(zero_params(7, 5), np.arange(7.0)) == 0.5

    def test_hand_built_network(self):
        # a1 = 0.5 - 0.25 + 0.1 = 0.35; a2 = 0.7 - 0.2 = 0.5; z = -0.75 + 0.25 = -0.5
        assert forward(tiny_network(), np.array([1.0, 1.0])) == pytest.approx(1 / (1 + math.exp(0.5)), abs=1e-15)

    def test_eval_mode_ignores_seed(self):
        p = init_params(6, 8, 1)
        x = np.random.default_rng(0).normal(size=6)
        assert forward(p, x, seed=1) == forward(p, x, seed=2) == forward(p, x)

    def test_dropout_pass_is_seeded(self):
        p = init_params(6, 32, 1)
        X = np.random.default_rng(0).normal(size=(5, 6))
        a = forward(p, X, dropout=0.5, seed=3)
        assert np.array_equal(a, forward(p, X, dropout=0.5, seed=3))
        assert not np.array_equal(a, forward(p, X, dropout=0.5, seed=4))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(init_params(4, 3), np.zeros(5))

    @settings(max_examples=50)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=3), st.integers(0, 100))
    def test_output_strictly_inside_unit_interval(self, x, seed):
        p = forward(init_params(3, 10, seed), np.array(x))
        assert 0.0 < p < 1.0


class TestLoss:
    def test_half_probability_is_ln2(self):
        X = np.random.default_rng(0).normal(size=(6, 4))
        assert loss(zero_params(4, 3), X, [0, 1, 1, 0, 1, 0]) == pytest.approx(math.log(2), abs=1e-15)

    def test_perfect_prediction(self):
        assert bce_term(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.ones(2)) < 1e-11

    def test_regularizer_is_additive(self):
        p = init_params(4, 5, 2)
        X = np.random.default_rng(1).normal(size=(8, 4))
        y = np.arange(8) % 2
        extra = 0.3 * sum(float(np.sum(W * W)) for W in (p.W1, p.W2, p.W3))
        assert loss(p, X, y, lam=0.3) == pytest.approx(loss(p, X, y) + extra, rel=1e-13)

    def test_doubled_weights_double_bce(self):
        p = init_params(4, 5, 3)
        X = np.random.default_rng(2).normal(size=(8, 4))
        y = np.arange(8) % 2
        w = np.linspace(0.5, 2, 8)
        lam = 0.01
        one = loss(p, X, y, w, lam) - l2_term(p, lam)
        two = loss(p, X, y, 2 * w, lam) - l2_term(p, lam)
        assert two == pytest.approx(2 * one, rel=1e-12)

    def test_rejects_bad_batches(self):
        p = init_params(2, 2)
        with pytest.raises(ValueError):
            loss(p, np.zeros((0, 2)), [])
        with pytest.raises(ValueError):
            loss(p, np.zeros((1, 2)), [0.5])


class TestBackward:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed):
        params, X, y, w, lam = gradient_draw(seed)
        _, grads = backward(params, X, y, w, lam)
        numeric = numeric_gradient(lambda: loss(params, X, y, w, lam), params)
        assert max_relative_error(grads.as_list(), numeric) <= 1e-4

    def test_returns_loss_value(self):
        params, X, y, w, lam = gradient_draw(3)
        assert backward(params, X, y, w, lam)[0] == loss(params, X, y, w, lam)

    def test_stationary_point(self):
        X = np.array([[1.0, 2.0], [-1.0, -2.0], [1.0, 2.0], [-1.0, -2.0]])
        _, g = backward(zero_params(2, 3), X, [0, 0, 1, 1])
        assert all(not a.any() for a in g.as_list())

    def test_l2_gradient_is_two_lambda_w(self):
        params, X, y, w, _ = gradient_draw(5)
        _, g0 = backward(params, X, y, w, 0.0)
        _, g1 = backward(params, X, y, w, 0.25)
        for name in ("W1", "W2", "W3"):
            assert np.allclose(getattr(g1, name) - getattr(g0, name), 0.5 * getattr(params, name), atol=1e-15)
        for name in ("b1", "b2", "b3"):
            assert np.array_equal(getattr(g1, name), getattr(g0, name))


class TestTraining:
    def test_separable_blobs(self):
        X, y = blobs()
        params, _, history = fit(X, y, TrainConfig(epochs=50, batch_size=32, seed=0))
        acc = np.mean((forward(params, X) > 0.5) == (y > 0.5))
        assert acc >= 0.99
        assert all(b <= 1.05 * a for a, b in zip(history, history[1:]))
        assert history[-1] < history[0]

    def test_single_class_rejected(self):
        X, _ = blobs(20)
        with pytest.raises(ValueError):
            fit(X, np.ones(20), TrainConfig(epochs=1))

    def test_same_seed_is_bitwise_identical(self):
        assert bundle_to_bytes(small_bundle(4)) == bundle_to_bytes(small_bundle(4))

    def test_inverse_frequency_weights(self):
        X, _ = blobs(20)
        y = np.array([1.0] * 5 + [0.0] * 15)
        _, cw, _ = fit(X, y, TrainConfig(epochs=1, hidden=4))
        assert cw == pytest.approx((20 / 30, 20 / 10))


class TestInference:
    def test_empty_record_scores(self):
        p = score_viewpoint(small_bundle(), VisibilityRecord.empty())
        assert 0.0 < p < 1.0

    def test_pure_function(self):
        b = small_bundle()
        r = random_record(9)
        assert score_viewpoint(b, r) == score_viewpoint(b, r)

    def test_batch_matches_single(self):
        b = small_bundle()
        recs = [random_record(s) for s in range(5)]
        batch = score_features(b, [encode(r, b.encoding) for r in recs])
        assert np.allclose(batch, [score_viewpoint(b, r) for r in recs], rtol=0, atol=1e-15)

    def test_latency_full_size(self):
        enc = EncodingConfig()
        feats = [encode(random_record(i, 80), enc) for i in range(8)]
        bundle = train(feats, np.arange(8) % 2, TrainConfig(epochs=1, batch_size=8), enc)
        rec = random_record(99, 200)
        score_viewpoint(bundle, rec)
        t0 = time.perf_counter()
        for _ in range(20):
            score_viewpoint(bundle, rec)
        assert (time.perf_counter() - t0) / 20 < 0.02


class TestPersistence:
    def test_save_load_forward_bitwise(self, tmp_path):
        b = small_bundle(2)
        save_bundle(b, tmp_path / "m.bin")
        back = load_bundle(tmp_path / "m.bin")
        assert back.params == b.params and back.stats == b.stats and back.encoding == b.encoding
        recs = [random_record(s) for s in range(6)]
        assert [score_viewpoint(b, r) for r in recs] == [score_viewpoint(back, r) for r in recs]
        assert bundle_to_bytes(back) == bundle_to_bytes(b)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            bundle_from_bytes(b"not a model at all")
        data = bundle_to_bytes(small_bundle())
        with pytest.raises(ValueError):
            bundle_from_bytes(data + b"\0")
