import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import kstest

from palmtree.data import Dataset, categorical, numeric
from palmtree.fluctuation import (
    InstabilityResult,
    chisq_categorical,
    choose,
    decorrelate_scores,
    instability_tests,
    select_split_variable,
    suplm_ordered,
)
from palmtree.glm import fit_glm
from palmtree.suplm_dist import suplm_pvalue


def null_scores(rng, n=300):
    X = np.column_stack([np.ones(n), rng.integers(0, 2, n)])
    y = X @ [0.3, 0.5] + rng.standard_normal(n)
    return fit_glm(X, y).scores


def test_white_input_unchanged():
    n = 64
    # orthogonal columns with norm sqrt(n) and zero mean
    h = np.tile([1.0, -1.0], n // 2)
    g = np.tile([1.0, 1.0, -1.0, -1.0], n // 4)
    S = np.column_stack([h, g])
    np.testing.assert_allclose(decorrelate_scores(S).values, S, atol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_whitened_covariance_is_identity(seed, k):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((60, k)) @ rng.standard_normal((k, k)) + rng.standard_normal(k)
    w = decorrelate_scores(S)
    assert w.k_eff == k
    np.testing.assert_allclose(w.values.T @ w.values / 60, np.eye(k), atol=1e-8)


def test_duplicated_column_drops_rank(rng):
    S = rng.standard_normal((50, 3))
    S = np.column_stack([S, S[:, 1]])
    w = decorrelate_scores(S)
    assert w.k_eff == 3
    np.testing.assert_allclose(w.values.T @ w.values / 50, np.eye(3), atol=1e-8)


def test_zero_scores_give_p_one(rng):
    stat, p, testable = suplm_ordered(np.zeros((100, 2)), rng.standard_normal(100))
    assert stat == 0 and p == pytest.approx(1.0)
    stat, p, testable, _ = chisq_categorical(np.zeros((90, 2)), np.repeat([0, 1, 2], 30))
    assert stat == 0 and p == 1.0 and testable


def test_untestable_cases(rng):
    w = rng.standard_normal((50, 2))
    assert suplm_ordered(w, np.zeros(50))[2] is False
    # a single distinct boundary falls outside the trim window
    z = np.r_[np.zeros(2), np.ones(48)]
    stat, p, testable = suplm_ordered(w, z)
    assert (stat, p, testable) == (0.0, 1.0, False)
    assert chisq_categorical(w, np.zeros(50, dtype=int))[2] is False


def test_suplm_null_uniform():
    rng = np.random.default_rng(2024)
    ps = [suplm_ordered(decorrelate_scores(null_scores(rng)).values, rng.standard_normal(300))[1]
          for _ in range(500)]
    assert kstest(ps, "uniform").statistic < 0.08


def test_chisq_null_uniform():
    rng = np.random.default_rng(77)
    ps = []
    for _ in range(500):
        w = decorrelate_scores(null_scores(rng)).values
        ps.append(chisq_categorical(w, rng.integers(0, 3, 300))[1])
    assert kstest(ps, "uniform").statistic < 0.08


def test_mean_shift_detected(rng):
    n = 200
    z = rng.standard_normal(n)
    S = rng.standard_normal((n, 2)) + np.where(z > np.median(z), 1.0, 0.0)[:, None]
    _, p, _ = suplm_ordered(decorrelate_scores(S).values, z)
    assert p < 0.01


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    S, z = rng.standard_normal((80, 2)), rng.standard_normal(80)
    a = suplm_ordered(decorrelate_scores(S).values, z)[0]
    b = suplm_ordered(decorrelate_scores(c * S).values, z)[0]
    assert abs(a - b) < 1e-6


@given(st.integers(0, 10_000))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    w = decorrelate_scores(rng.standard_normal((70, 2))).values
    z = np.round(rng.standard_normal(70), 1)  # includes ties
    assert suplm_ordered(w, z) == suplm_ordered(w, np.exp(3 * z) - 7)


def test_ties_never_separated():
    # two distinct values only: the single admissible boundary is at the tie block edge
    w = np.tile([[1.0, 0.0], [-1.0, 0.0]], (25, 1)) + np.linspace(0, 1e-3, 50)[:, None]
    z = np.r_[np.zeros(25), np.ones(25)]
    stat, _, testable = suplm_ordered(w, z)
    proc = w[:25].sum(axis=0) / np.sqrt(50)
    assert testable and stat == pytest.approx(np.sum(proc**2) / 0.25)


def test_pvalue_monotone_and_bounded():
    for k in (1, 2, 5, 25):
        stats = np.linspace(0, 60, 200)
        ps = [suplm_pvalue(s, k) for s in stats]
        assert all(0 <= p <= 1 for p in ps)
        assert all(a >= b for a, b in zip(ps, ps[1:]))


def test_pvalue_trim_interpolation_is_continuous():
    assert suplm_pvalue(12.0, 2, 0.1) == pytest.approx(suplm_pvalue(12.0, 2, 0.1 + 1e-9), rel=1e-5)
    # wider window means larger sup, hence larger p for the same statistic
    assert suplm_pvalue(12.0, 2, 0.05) > suplm_pvalue(12.0, 2, 0.1) > suplm_pvalue(12.0, 2, 0.2)


def _r(name, p, J):
    return InstabilityResult(name, 1.0, p, min(1.0, J * p), "ordered-supLM")


def test_bonferroni_selection():
    assert choose([_r("a", 0.001, 30)] + [_r(f"b{i}", 0.5, 30) for i in range(29)], 0.05) == "a"
    assert choose([_r("a", 0.002, 2), _r("b", 0.0005, 2)], 0.05) == "b"
    assert choose([_r("a", 0.002, 30)], 0.05) is None
    untestable = InstabilityResult("u", 0.0, 1.0, 1.0, "ordered-supLM", testable=False)
    assert choose([untestable], 0.05) is None


def test_adjusted_is_exact_bonferroni(rng):
    n = 200
    cols = [numeric("y", rng.standard_normal(n))] + [numeric(f"z{j}", rng.standard_normal(n)) for j in range(5)]
    cols.append(categorical("g", list(rng.choice(list("abc"), n))))
    ds = Dataset.from_columns(cols)
    fit = fit_glm(np.ones((n, 1)), ds.values("y"))
    names = [f"z{j}" for j in range(5)] + ["g"]
    var, res = select_split_variable(fit, ds, names)
    for r in res:
        assert r.p_adjusted == min(1.0, 6 * r.p_value)
        assert 0 <= r.p_value <= r.p_adjusted <= 1 and r.statistic >= 0
    assert [r.kind for r in res] == ["ordered-supLM"] * 5 + ["categorical-chisq"]
    assert res[-1].df == 2


def test_selects_unstable_variable(rng):
    n = 300
    z = rng.standard_normal(n)
    y = np.where(z > 0, 1.0, -1.0) + rng.standard_normal(n)
    ds = Dataset.from_columns([numeric("y", y), numeric("z", z), numeric("noise", rng.standard_normal(n))])
    fit = fit_glm(np.ones((n, 1)), y)
    var, res = select_split_variable(fit, ds, ["noise", "z"])
    assert var == "z"


def test_results_follow_variable_order(rng):
    ds = Dataset.from_columns([numeric(f"z{j}", rng.standard_normal(50)) for j in range(3)])
    res = instability_tests(rng.standard_normal((50, 1)), ds, ["z2", "z0", "z1"])
    assert [r.variable for r in res] == ["z2", "z0", "z1"]
