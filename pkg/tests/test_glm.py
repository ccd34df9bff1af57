import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from palmtree.data import Dataset, RoleSpec, numeric
from palmtree.glm import (
    DegeneratePartitionError,
    SingularDesignError,
    fit_glm,
    fit_interaction_glm,
    get_family,
    loglik_at,
    predict,
)

FAMILIES = ("gaussian", "binomial", "poisson")


def random_problem(seed, family, n=80, k=3):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
    beta = rng.uniform(-0.8, 0.8, k)
    eta = X @ beta
    if family == "gaussian":
        y = eta + rng.standard_normal(n)
    elif family == "binomial":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return X, y


def test_intercept_only_example():
    fit = fit_glm(np.ones((5, 1)), np.arange(1.0, 6.0))
    assert fit.coefficients[0] == pytest.approx(3.0, abs=1e-12)
    assert fit.dispersion == pytest.approx(2.0, abs=1e-12)
    expected = norm.logpdf(np.arange(1.0, 6.0), 3.0, np.sqrt(2.0)).sum()
    assert fit.loglik == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 10_000))
def test_gaussian_matches_normal_equations(seed):
    X, y = random_problem(seed, "gaussian", n=50, k=3)
    fit = fit_glm(X, y)
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(fit.coefficients, oracle, atol=1e-8, rtol=0)


def test_weighted_gaussian_matches_weighted_normal_equations(rng):
    X, y = random_problem(3, "gaussian")
    w = rng.uniform(0.2, 3, len(y))
    fit = fit_glm(X, y, weights=w)
    oracle = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    np.testing.assert_allclose(fit.coefficients, oracle, atol=1e-10)


def test_offset_equivalence(rng):
    X, y = random_problem(4, "gaussian")
    o = rng.standard_normal(len(y))
    a = fit_glm(X, y, offset=o).coefficients
    b = fit_glm(X, y - o).coefficients
    np.testing.assert_allclose(a, b, atol=1e-10)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_gaussian_scale_equivariance(seed, c):
    X, y = random_problem(seed, "gaussian", n=40)
    np.testing.assert_allclose(
        fit_glm(X, c * y).coefficients, c * fit_glm(X, y).coefficients, atol=1e-10 * max(1, c)
    )


@pytest.mark.parametrize("family", FAMILIES)
@given(seed=st.integers(0, 10_000))
def test_scores_sum_to_zero(family, seed):
    X, y = random_problem(seed, family)
    fit = fit_glm(X, y, family)
    if not fit.converged:
        return
    assert np.all(np.abs(fit.scores.sum(axis=0)) <= 1e-6 * len(y))


@pytest.mark.parametrize("family", FAMILIES)
@given(seed=st.integers(0, 10_000))
def test_loglik_is_sum_of_contributions(family, seed):
    X, y = random_problem(seed, family)
    fit = fit_glm(X, y, family)
    fam = get_family(family)
    eta = X @ fit.coefficients
    mean = eta if family == "gaussian" else fam.linkinv(eta)
    contrib = fam.loglik_obs(y, mean, fit.dispersion, None)
    assert fit.loglik == pytest.approx(contrib.sum(), rel=1e-10)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("seed", range(10))
def test_scores_match_finite_differences(family, seed):
    X, y = random_problem(seed, family, n=30)
    off = np.random.default_rng(seed).normal(0, 0.3, len(y))
    fit = fit_glm(X, y, family, offset=off)
    h = 1e-6
    for i in range(len(y)):
        xi, yi, oi = X[i:i + 1], y[i:i + 1], off[i:i + 1]
        fd = np.empty(fit.k)
        for j in range(fit.k):
            e = np.zeros(fit.k)
            e[j] = h
            up = loglik_at(xi, yi, fit.coefficients + e, family, oi, dispersion=fit.dispersion)
            dn = loglik_at(xi, yi, fit.coefficients - e, family, oi, dispersion=fit.dispersion)
            fd[j] = (up - dn) / (2 * h)
        np.testing.assert_allclose(fit.scores[i], fd, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("family", FAMILIES)
def test_inverse_link_roundtrip(family):
    fam = get_family(family)
    mu = {"gaussian": np.linspace(-50, 50, 101),
          "binomial": np.linspace(1e-6, 1 - 1e-6, 101),
          "poisson": np.geomspace(1e-6, 1e6, 101)}[family]
    np.testing.assert_allclose(fam.linkinv(fam.linkfun(mu)), mu, rtol=1e-12, atol=0)


def test_singular_design_names_collinear_columns(rng):
    x = rng.standard_normal(20)
    X = np.column_stack([np.ones(20), x, 2 * x])
    with pytest.raises(SingularDesignError) as exc:
        fit_glm(X, rng.standard_normal(20), column_names=["(Intercept)", "a", "b"])
    assert set(exc.value.collinear) & {"a", "b"}


def test_separation_flags_nonconvergence(caplog):
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    X = np.column_stack([np.ones(40), x])
    with caplog.at_level(logging.WARNING):
        fit = fit_glm(X, y, "binomial")
    assert not fit.converged
    assert caplog.records


def test_binomial_converges_quickly():
    X, y = random_problem(1, "binomial", n=300)
    fit = fit_glm(X, y, "binomial")
    assert fit.converged and fit.iterations <= 10


def test_predict_examples():
    g = fit_glm(np.column_stack([np.ones(5), np.arange(5.0)]), 1 + 2 * np.arange(5.0))
    assert predict(g, [[1, 3]])[0] == pytest.approx(7.0)
    b = fit_glm(np.ones((4, 1)), np.array([0.0, 1, 0, 1]), "binomial")
    assert predict(b, [[1]])[0] == pytest.approx(0.5)
    one = fit_glm(np.ones((5, 1)), np.full(5, 2.0) + [0.1, -0.1, 0, 0.2, -0.2])
    assert predict(one, [[1]], offset=5.0)[0] == pytest.approx(7.0)
    with pytest.raises(ValueError):
        predict(g, [[1, 2, 3]])


def _joint_data(rng, n=120):
    return Dataset.from_columns([
        numeric("y", rng.standard_normal(n)),
        numeric("xa", rng.integers(0, 2, n)),
        numeric("f", rng.standard_normal(n)),
    ])


def test_interaction_single_group_collapses(rng):
    ds = _joint_data(rng)
    spec = RoleSpec("y", ("xa",), ("f",), ())
    joint = fit_interaction_glm(ds, np.ones(ds.n, dtype=int), spec)
    X = np.column_stack([np.ones(ds.n), ds.values("xa"), ds.values("f")])
    np.testing.assert_allclose(joint.coefficients, fit_glm(X, ds.values("y")).coefficients, atol=1e-12)
    assert joint.column_names == ("1:(Intercept)", "1:xa", "f")


def test_interaction_group_means(rng):
    n = 4000
    part = np.repeat([1, 2], n // 2)
    y = np.where(part == 1, -1.0, 2.5) + rng.standard_normal(n)
    ds = Dataset.from_columns([numeric("y", y)])
    fit = fit_interaction_glm(ds, part, RoleSpec("y"))
    np.testing.assert_allclose(fit.coefficients, [y[part == 1].mean(), y[part == 2].mean()], atol=1e-10)
    np.testing.assert_allclose(fit.coefficients, [-1.0, 2.5], atol=0.1)


def test_interaction_empty_label(rng):
    ds = _joint_data(rng)
    part = np.where(np.arange(ds.n) < 60, 1, 3)
    with pytest.raises(DegeneratePartitionError):
        fit_interaction_glm(ds, part, RoleSpec("y", ("xa",), ("f",), ()))


@pytest.mark.parametrize("seed", range(5))
def test_joint_fit_beats_separate_fits_with_any_gamma(seed):
    rng = np.random.default_rng(seed)
    ds = _joint_data(rng, 90)
    part = rng.integers(1, 4, ds.n)
    spec = RoleSpec("y", ("xa",), ("f",), ())
    joint = fit_interaction_glm(ds, part, spec)
    y, f = ds.values("y"), ds.values("f")
    Xv = np.column_stack([np.ones(ds.n), ds.values("xa")])
    for gamma in rng.normal(0, 1, 5):
        eta = np.empty(ds.n)
        for b in (1, 2, 3):
            rows = part == b
            sub = fit_glm(Xv[rows], y[rows], offset=gamma * f[rows])
            eta[rows] = Xv[rows] @ sub.coefficients
        ll = loglik_at(np.ones((ds.n, 1)), y, np.zeros(1), "gaussian", offset=eta + gamma * f)
        assert joint.loglik >= ll - 1e-8
