import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normlab.exceptions import FormatError, InputError
from normlab.gmm import (GaussianMixture, GmmModel, em_fit, kmeanspp_init, load_gmm, log_density,
                         responsibilities, save_gmm, score_samples)

from oracles import diag_gauss_logpdf


def _two_modes(seed, n=2000):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.normal(-5, 1, n // 2), rng.normal(5, 1, n // 2)])[:, None]


def test_log_density_matches_scalar_loop(rng):
    model = GmmModel([0.2, 0.8], rng.normal(size=(2, 3)), 0.5 + rng.random((2, 3)))
    x = rng.normal(size=3)
    expected = math.log(sum(w * math.exp(diag_gauss_logpdf(x, m, v))
                            for w, m, v in zip(model.weights, model.means, model.variances)))
    assert log_density(model, x) == pytest.approx(expected, rel=1e-13)


def test_log_density_far_from_means_is_finite():
    model = GmmModel([0.5, 0.5], [[0.0], [1.0]], [[1e-3], [1e-3]])
    assert np.isfinite(log_density(model, np.array([1e4])))


def test_responsibilities_rows_sum_to_one(rng):
    model = GmmModel([0.3, 0.3, 0.4], rng.normal(size=(3, 2)), np.ones((3, 2)))
    r = responsibilities(model, rng.normal(size=(50, 2)))
    np.testing.assert_allclose(r.sum(axis=1), 1.0, rtol=1e-12)


def test_model_invariants():
    with pytest.raises(InputError):
        GmmModel([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(InputError):
        GmmModel([1.0], [[0.0]], [[1e-9]])


def test_json_round_trip(tmp_path, rng):
    model = GmmModel([0.25, 0.75], rng.normal(size=(2, 4)), 1 + rng.random((2, 4)))
    save_gmm(model, tmp_path / "g.json")
    back = load_gmm(tmp_path / "g.json")
    np.testing.assert_array_equal(back.means, model.means)
    np.testing.assert_array_equal(back.variances, model.variances)
    doc = model.to_dict()
    doc["version"] = "gmm-v0"
    with pytest.raises(FormatError):
        GmmModel.from_dict(doc)


def test_two_mode_recovery():
    X = _two_modes(0)
    model, diag = em_fit(X, 2, kmeanspp_init(X, 2, 0))
    order = np.argsort(model.means[:, 0])
    np.testing.assert_allclose(model.means[order, 0], [-5, 5], atol=0.1)
    np.testing.assert_allclose(model.weights[order], [0.5, 0.5], atol=0.05)
    assert diag.is_monotone(1e-9) and diag.converged


def test_k1_matches_sample_moments(rng):
    X = rng.normal(size=(500, 3)) * [1, 2, 3] + [4, 5, 6]
    model, _ = em_fit(X, 1)
    np.testing.assert_allclose(model.means[0], X.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(model.variances[0], X.var(axis=0), rtol=1e-10)
    assert model.weights[0] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
def test_em_log_likelihood_is_monotone(seed, k, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, d)) + rng.integers(-3, 4, size=(120, 1))
    _, diag = em_fit(X, k, kmeanspp_init(X, k, seed), max_iter=60)
    assert diag.is_monotone(1e-9)


def test_variance_floor_holds():
    X = np.concatenate([np.zeros((50, 1)), np.ones((50, 1))])
    model, _ = em_fit(X, 2, [[0.0], [1.0]], var_floor=1e-6)
    assert np.all(model.variances >= 1e-6)


def test_empty_component_is_reseeded():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 1))
    # a center far outside the data gets no responsibility and must be re-seeded
    model, diag = em_fit(X, 2, [[0.0], [1e6]], max_iter=20)
    assert diag.reseeded and diag.reseeded[0][1] == 1
    assert np.all(np.isfinite(model.means))


def test_kmeanspp_deterministic(rng):
    X = rng.normal(size=(100, 2))
    np.testing.assert_array_equal(kmeanspp_init(X, 3, 7), kmeanspp_init(X, 3, 7))


def test_estimator_api():
    X = _two_modes(1)
    est = GaussianMixture(n_components=2, random_state=0).fit(X)
    assert est.get_params()["n_components"] == 2
    assert est.predict(X).shape == (2000,)
    assert est.score(X) == pytest.approx(np.mean(score_samples(est.model_, X)))
    assert set(np.unique(est.predict(np.array([[-5.0], [5.0]])))) == {0, 1}


def test_too_few_samples():
    with pytest.raises(InputError):
        em_fit(np.zeros((2, 1)), 3)
