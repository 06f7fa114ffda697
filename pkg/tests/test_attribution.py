import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ztafl.attribution import (
    AttributionVector,
    cohort_threshold,
    draw_background,
    exact_shapley,
    mc_shapley,
    model_importance,
    path_attribution,
    stability_score,
)
from ztafl.errors import InvalidInputError, ShapeError
from ztafl.model import MlpModel


class Linear:
    def __init__(self, w, b=0.0):
        self.w, self.b = np.asarray(w, float), b

    def score(self, X, targets):
        return np.atleast_2d(X) @ self.w + self.b

    def score_grad(self, X, targets):
        return np.tile(self.w, (np.atleast_2d(X).shape[0], 1))


class Product:
    """x0 * x1 + x2: has an interaction term, so Shapley values split it."""

    def score(self, X, targets):
        X = np.atleast_2d(X)
        return X[:, 0] * X[:, 1] + X[:, 2]

    def score_grad(self, X, targets):
        X = np.atleast_2d(X)
        g = np.zeros_like(X)
        g[:, 0], g[:, 1], g[:, 2] = X[:, 1], X[:, 0], 1.0
        return g


def brute_shapley(f, x, bg):
    """Average marginal contribution over all d! orderings (textbook definition)."""
    d = x.size

    def v(S):
        rows = bg.copy()
        rows[:, list(S)] = x[list(S)]
        return f(rows).mean()

    phi = np.zeros(d)
    perms = list(itertools.permutations(range(d)))
    for p in perms:
        S = []
        for j in p:
            before = v(S)
            S.append(j)
            phi[j] += v(S) - before
    return phi / len(perms)


def test_linear_closed_form(rng):
    w = rng.normal(size=5)
    x, bg = rng.random(5), rng.random((7, 5))
    want = w * (x - bg.mean(0))
    lin = Linear(w, 0.3)
    np.testing.assert_allclose(exact_shapley(lin, x, bg).phi, want, atol=1e-12)
    np.testing.assert_allclose(path_attribution(lin, x, bg, 8).phi, want, atol=1e-12)


def test_exact_matches_permutation_definition(rng):
    x, bg = rng.random(4), rng.random((5, 4))
    f = Product()
    np.testing.assert_allclose(exact_shapley(f, x, bg).phi,
                               brute_shapley(lambda R: f.score(R, 0), x, bg), atol=1e-12)


def test_exact_on_model_matches_permutations_and_efficiency(tiny_model, rng):
    x, bg = rng.random(6), rng.random((4, 6))
    phi = exact_shapley(tiny_model, x, bg, target=1).phi
    np.testing.assert_allclose(phi, brute_shapley(lambda R: tiny_model.score(R, 1), x, bg), atol=1e-12)
    gap = tiny_model.score(x[None], 1)[0] - tiny_model.score(bg, 1).mean()
    assert abs(phi.sum() - gap) < 1e-9


def test_mc_converges_to_exact(tiny_model, rng):
    x, bg = rng.random(6), rng.random((6, 6))
    ex = exact_shapley(tiny_model, x, bg, 2).phi
    mc = mc_shapley(tiny_model, x, bg, n_perms=2000, seed=0, target=2).phi
    assert np.abs(mc - ex).max() < 0.05 * (ex.max() - ex.min())
    # each permutation telescopes, so the estimate is efficient as well
    assert abs(mc.sum() - ex.sum()) < 1e-9
    assert np.array_equal(mc, mc_shapley(tiny_model, x, bg, 2000, 0, 2).phi)


def test_path_completeness(tiny_model, rng):
    x, bg = rng.random(6), rng.random((5, 6))
    phi = path_attribution(tiny_model, x, bg, m_steps=64, target=0).phi
    gap = tiny_model.score(x[None], 0)[0] - tiny_model.score(bg, 0).mean()
    assert abs(phi.sum() - gap) <= 0.02 * abs(gap)


def test_model_importance_equals_mean_abs_path(tiny_model, rng):
    X, y, bg = rng.random((3, 6)), np.array([0, 1, 2]), rng.random((4, 6))
    imp = model_importance(tiny_model, X, y, bg, m_steps=8)
    want = np.mean([np.abs(path_attribution(tiny_model, X[i], bg, 8, y[i]).phi) for i in range(3)], axis=0)
    np.testing.assert_allclose(imp.phi, want, rtol=1e-3, atol=1e-7)


class NoFast:
    def __init__(self, m):
        self.m = m

    def score(self, X, t):
        return self.m.score(X, t)

    def score_grad(self, X, t):
        return self.m.score_grad(X, t)


def test_model_importance_generic_path_matches_fast(tiny_model, rng):
    X, y, bg = rng.random((4, 6)), np.array([0, 1, 2, 0]), rng.random((5, 6))
    fast = model_importance(tiny_model, X, y, bg, 16).phi
    slow = model_importance(NoFast(tiny_model), X, y, bg, 16).phi
    np.testing.assert_allclose(fast, slow, rtol=1e-3, atol=1e-7)


def test_exact_refuses_large_d():
    with pytest.raises(InvalidInputError):
        exact_shapley(Linear(np.ones(13)), np.zeros(13), np.zeros((2, 13)))
    with pytest.raises(ShapeError):
        exact_shapley(Linear(np.ones(3)), np.zeros(3), np.zeros((2, 4)))


def test_background_draw():
    X = np.arange(50.0).reshape(25, 2)
    bg = draw_background(X, 10, seed=1)
    assert len(bg) == 10 and len(np.unique(bg.samples[:, 0])) == 10
    assert len(draw_background(X, 40, seed=1)) == 40


def test_stability_score_values():
    assert stability_score([1.0, 0.0], [1.0, 0.0]).s == pytest.approx(1.0, abs=1e-6)
    assert stability_score([0.0, 0.0], [3.0, 4.0]).s == pytest.approx(1 - 5 / (5 + 1e-6))
    assert stability_score([6.0, 8.0], [3.0, 4.0]).s < 1e-6
    # unclamped: far-away vectors go negative
    assert stability_score([30.0, 40.0], [3.0, 4.0]).s < -5
    with pytest.raises(ShapeError):
        stability_score([1.0], [1.0, 2.0])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=5), st.integers(0, 1000))
def test_stability_bounded_above_by_one(v, seed):
    r = np.random.default_rng(seed).normal(size=len(v))
    assert stability_score(np.asarray(v), r).s <= 1.0


def test_cohort_threshold_population_sigma():
    s = np.array([0.9, 0.8, 0.85, 0.2, 0.88, 0.86, 0.87])
    cs = cohort_threshold(s, 2.0)
    assert cs.mu == pytest.approx(s.mean())
    assert cs.sigma == pytest.approx(np.sqrt(np.mean((s - s.mean()) ** 2)))
    assert cs.threshold == pytest.approx(s.mean() - 2 * cs.sigma)
    assert not cs.blind_spot and cohort_threshold(s[:5]).blind_spot


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=5))
def test_small_cohorts_never_filter(scores):
    cs = cohort_threshold(np.asarray(scores), 2.0)
    assert all(s >= cs.threshold - 1e-12 for s in scores)


def test_attribution_vector_rejects_nan():
    with pytest.raises(InvalidInputError):
        AttributionVector(np.array([np.nan]), "exact")


def test_importance_on_real_model_is_nonnegative(small_data):
    tr, va, _ = small_data
    m = MlpModel.init((tr.n_features, 8, tr.n_classes), seed=0)
    imp = model_importance(m, va.X[:8], va.y[:8], draw_background(va.X, 20, 0), 16)
    assert imp.phi.shape == (tr.n_features,) and np.all(imp.phi >= 0)
