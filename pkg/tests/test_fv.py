import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_sequence
from oracles import gmm_loglik_loop, max_relative_error
from rnnfv.errors import DataError
from rnnfv.fv import (FimDiagonal, FisherVector, GmmModel, NormalizationConfig, concat_fuse, fim_estimate,
                      fim_normalize, gmm_fit, gmm_fv, gmm_log_likelihood, l2_normalize, mean_pool, normalize,
                      power_normalize, rnn_fv, rnn_fv_dim, rnn_fv_matrix, subsample_coordinates, subsample_indices)
from rnnfv.rnn import FeatureSequence, RnnArchitecture, RnnModel, rnn_backprop, rnn_init, zero_model

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestMeanPool:
    def test_examples(self):
        np.testing.assert_array_equal(mean_pool(FeatureSequence([[1.0, 2.0], [3.0, 4.0]])), [2.0, 3.0])
        np.testing.assert_array_equal(mean_pool(FeatureSequence([[5.0, -1.0]])), [5.0, -1.0])

    def test_order_invariant(self, rng):
        x = rng.normal(size=(6, 3))
        np.testing.assert_allclose(mean_pool(x), mean_pool(x[::-1]), atol=1e-15)

    def test_empty(self):
        with pytest.raises(DataError):
            mean_pool(np.zeros((0, 3)))


class TestGmm:
    def test_single_component_is_ml_estimate(self, rng):
        X = rng.normal(loc=2.0, scale=3.0, size=(500, 4))
        g = gmm_fit(X, 1, seed=0)
        np.testing.assert_allclose(g.weights, [1.0])
        np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(g.sigmas[0], X.std(axis=0), atol=1e-10)

    def test_recovers_planted_clusters(self, rng):
        centers = np.array([[-5.0, 0.0], [5.0, 0.0], [0.0, 8.0]])
        X = np.vstack([c + 0.5 * rng.normal(size=(300, 2)) for c in centers])
        g = gmm_fit(X, 3, seed=1)
        found = g.means[np.argsort(g.means[:, 0] + 0.01 * g.means[:, 1])]
        expected = centers[np.argsort(centers[:, 0] + 0.01 * centers[:, 1])]
        np.testing.assert_allclose(found, expected, atol=0.15)
        np.testing.assert_allclose(g.weights, 1 / 3, atol=0.02)
        np.testing.assert_allclose(g.sigmas, 0.5, atol=0.07)

    def test_deterministic(self, rng):
        X = rng.normal(size=(200, 3))
        a, b = gmm_fit(X, 4, seed=5), gmm_fit(X, 4, seed=5)
        assert a.means.tobytes() == b.means.tobytes() and a.sigmas.tobytes() == b.sigmas.tobytes()

    def test_em_is_monotone(self, rng):
        X = np.vstack([rng.normal(size=(150, 3)), rng.normal(loc=3, size=(150, 3))])
        hist = gmm_fit(X, 5, seed=2).log_likelihood_history
        assert len(hist) >= 2
        assert all(b >= a - 1e-8 * abs(a) for a, b in zip(hist, hist[1:]))

    def test_log_likelihood_matches_loop(self, rng):
        X = rng.normal(size=(40, 3))
        g = gmm_fit(X, 3, seed=0)
        assert gmm_log_likelihood(g, X) == pytest.approx(gmm_loglik_loop(g.weights, g.means, g.sigmas, X), rel=1e-12)

    def test_variance_floor(self):
        X = np.array([[1.0, 2.0]] * 10 + [[1.0, 3.0]] * 10)
        g = gmm_fit(X, 1, seed=0)
        assert g.sigmas[0, 0] == pytest.approx(math.sqrt(1e-6))

    def test_invalid(self, rng):
        with pytest.raises(ValueError):
            gmm_fit(rng.normal(size=(3, 2)), 4, seed=0)
        with pytest.raises(ValueError):
            GmmModel([0.5, 0.6], np.zeros((2, 2)), np.ones((2, 2)))


class TestGmmFv:
    def test_dimension_and_mode(self):
        g = GmmModel([0.5, 0.5], [[0.0, 0.0], [1.0, 1.0]], np.ones((2, 2)))
        fv = gmm_fv(g, np.array([[0.3, -0.2]]))
        assert fv.dim == 8 and fv.source == "gmm-fv"

    def test_single_component_closed_form(self):
        # at x = mu the mean gradient vanishes and dsigma = -1/sigma per element
        g = GmmModel([1.0], [[1.0, -2.0]], [[2.0, 0.5]])
        fv = gmm_fv(g, np.array([[1.0, -2.0], [1.0, -2.0]]))
        np.testing.assert_allclose(fv.values, [0, 0, -1.0, -4.0], atol=1e-14)

    def test_finite_differences(self, rng):
        w = np.array([0.3, 0.7])
        mu = rng.normal(size=(2, 3))
        sd = rng.uniform(0.5, 1.5, size=(2, 3))
        X = rng.normal(size=(5, 3))
        analytic = gmm_fv(GmmModel(w, mu, sd), X).values
        eps = 1e-6
        numeric = []
        for target in ("mu", "sd"):
            for idx in np.ndindex(2, 3):
                p, m = {"mu": mu.copy(), "sd": sd.copy()}, {"mu": mu.copy(), "sd": sd.copy()}
                p[target][idx] += eps
                m[target][idx] -= eps
                numeric.append((gmm_loglik_loop(w, p["mu"], p["sd"], X) - gmm_loglik_loop(w, m["mu"], m["sd"], X))
                               / (2 * eps))
        assert max_relative_error(analytic, np.array(numeric)) < 1e-5

    def test_permutation_invariant(self, rng):
        g = GmmModel([0.4, 0.6], rng.normal(size=(2, 3)), np.ones((2, 3)))
        X = rng.normal(size=(7, 3))
        np.testing.assert_allclose(gmm_fv(g, X).values, gmm_fv(g, X[rng.permutation(7)]).values, atol=1e-12)

    def test_dimension_mismatch(self):
        g = GmmModel([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        with pytest.raises(DataError):
            gmm_fv(g, np.zeros((2, 3)))


class TestRnnFv:
    def test_large_output_layer_dimension(self):
        arch = RnnArchitecture(input_dim=500, lstm_units=200, output_dim=500, fc1_units=None)
        m = rnn_init(arch, 0)
        assert rnn_fv_dim(m) == 100500
        fv = rnn_fv(m, FeatureSequence(np.random.default_rng(0).normal(size=(2, 500))))
        assert fv.dim == 100500

    def test_layout_rows(self, small_regression, rng):
        seq = random_sequence(rng, 4)
        g = rnn_backprop(small_regression, seq)
        fv = rnn_fv(small_regression, seq, aggregation="sum").values.reshape(5, 9)
        np.testing.assert_allclose(fv[:, :8], g["out.weight"], atol=1e-14)
        np.testing.assert_allclose(fv[:, 8], g["out.bias"], atol=1e-14)

    def test_mean_is_sum_over_length(self, small_regression, rng):
        seq = random_sequence(rng, 6)
        s = rnn_fv(small_regression, seq, aggregation="sum").values
        m = rnn_fv(small_regression, seq, aggregation="mean").values
        np.testing.assert_allclose(m * 6, s, atol=1e-12)
        np.testing.assert_allclose(l2_normalize(m), l2_normalize(s), atol=1e-12)

    def test_all_weights_scope(self, small_regression, rng):
        seq = random_sequence(rng, 3)
        fv = rnn_fv(small_regression, seq, aggregation="sum", scope="all-weights")
        assert fv.dim == small_regression.num_params

    def test_matrix_matches_single(self, small_regression, rng):
        seqs = [random_sequence(rng, n) for n in (3, 1, 5)]
        M = rnn_fv_matrix(small_regression, seqs)
        for row, s in zip(M, seqs):
            np.testing.assert_allclose(row, rnn_fv(small_regression, s).values, atol=1e-12)

    def test_perfect_predictor_is_degenerate(self):
        arch = RnnArchitecture(3, 4, 3, fc1_units=4)
        params = dict(zero_model(arch).params)
        c = np.array([1.0, 2.0, 3.0])
        params["out.bias"] = c
        m = RnnModel(arch, params)
        with pytest.warns(UserWarning):
            fv = rnn_fv(m, FeatureSequence(np.tile(c, (4, 1))))
        assert fv.degenerate
        assert not l2_normalize(fv.values).any()

    def test_deterministic(self, small_regression, rng):
        seq = random_sequence(rng, 5)
        assert rnn_fv(small_regression, seq).values.tobytes() == rnn_fv(small_regression, seq).values.tobytes()

    def test_bad_options(self, small_regression, rng):
        with pytest.raises(ValueError):
            rnn_fv(small_regression, random_sequence(rng), aggregation="max")
        with pytest.raises(ValueError):
            rnn_fv(small_regression, random_sequence(rng), scope="lstm")


class TestSubsample:
    def test_sorted_unique(self):
        idx = subsample_indices(100, 10, seed=3)
        assert len(set(idx.tolist())) == 10 and np.all(np.diff(idx) > 0)
        np.testing.assert_array_equal(idx, subsample_indices(100, 10, seed=3))

    def test_applies_to_vector(self):
        fv = FisherVector(np.arange(20.0), "rnn-fv")
        sub = subsample_coordinates(fv, 5, seed=1)
        np.testing.assert_array_equal(sub.values, subsample_indices(20, 5, 1).astype(float))
        assert sub.meta["subsample_seed"] == 1

    def test_too_many(self):
        with pytest.raises(ValueError):
            subsample_indices(5, 6, seed=0)


class TestNormalization:
    def test_fim_example(self):
        fim = fim_estimate(np.array([[1.0, 3.0], [3.0, 1.0]]))
        np.testing.assert_allclose(fim.values, [5.0, 5.0])
        np.testing.assert_allclose(fim_normalize(np.array([5.0, 10.0]), fim), [5 / math.sqrt(5), 10 / math.sqrt(5)])

    def test_fim_floor(self):
        fim = fim_estimate(np.array([[0.0, 1.0], [0.0, 1.0]]))
        assert fim.values[0] == 1e-12
        assert np.all(np.isfinite(fim_normalize(np.array([1.0, 1.0]), fim)))

    def test_fim_on_fisher_vector(self):
        fv = fim_normalize(FisherVector([2.0, 4.0], "rnn-fv"), FimDiagonal([4.0, 16.0]))
        np.testing.assert_allclose(fv.values, [1.0, 1.0])
        assert fv.normalizations == ("fim",)

    def test_power_example(self):
        np.testing.assert_allclose(power_normalize([4.0, -9.0, 0.0]), [2.0, -3.0, 0.0])

    def test_l2_example(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
        np.testing.assert_array_equal(l2_normalize([0.0, 0.0]), [0.0, 0.0])

    def test_chain_records_steps(self):
        out = normalize(FisherVector([4.0, -9.0, 0.0], "gmm-fv"), NormalizationConfig())
        assert out.normalizations == ("power(0.5)", "l2")
        np.testing.assert_allclose(out.values, np.array([2.0, -3.0, 0.0]) / math.sqrt(13))

    def test_chain_needs_fim(self):
        with pytest.raises(ValueError):
            normalize(FisherVector([1.0], "rnn-fv"), NormalizationConfig(apply_fim=True))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, 6, elements=finite))
    def test_power_is_invertible(self, v):
        np.testing.assert_allclose(power_normalize(v) ** 2 * np.sign(v), v, rtol=1e-9, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, 6, elements=finite))
    def test_l2_idempotent(self, v):
        once = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-12)
        n = np.linalg.norm(once)
        assert n == 0.0 or abs(n - 1) < 1e-12


class TestFusion:
    def test_concat(self):
        a = FisherVector([1.0, 2.0], "mean", ("l2",))
        b = FisherVector([3.0], "rnn-fv")
        f = concat_fuse([a, b])
        np.testing.assert_array_equal(f.values, [1.0, 2.0, 3.0])
        assert f.source == "fused" and [p["dim"] for p in f.meta["parts"]] == [2, 1]

    def test_single_is_identity(self):
        a = FisherVector([1.0, 2.0], "mean")
        assert concat_fuse([a]) is a

    def test_empty(self):
        with pytest.raises(ValueError):
            concat_fuse([])
