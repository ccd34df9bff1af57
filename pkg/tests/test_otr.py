from dataclasses import replace

import numpy as np
import pytest

from palmtree.data import Dataset, RoleSpec, SchemaError, categorical, numeric
from palmtree.glm import get_family
from palmtree.otr import ClassTree, fit_otr, fit_outcome_model, fit_weighted_cart, otr_regime, predicted_benefit


def otr_data(n, seed, effect=lambda z1: 0.2 + z1, noise=1.0, family="gaussian"):
    rng = np.random.default_rng(seed)
    z1, z2, f = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
    xa = rng.integers(0, 2, n).astype(float)
    eta = xa * effect(z1) + 0.5 * f
    if family == "binomial":
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = eta + noise * rng.standard_normal(n)
    ds = Dataset.from_columns([numeric("y", y), numeric("xa", xa), numeric("z1", z1), numeric("z2", z2),
                               numeric("f", f)])
    return ds, RoleSpec("y", ("xa",), ("f",), ("z1", "z2"), family=family)


def test_design_columns_minimal():
    ds, _ = otr_data(50, 0)
    model = fit_outcome_model(ds, RoleSpec("y", ("xa",), (), ("z1",)))
    assert model.columns == ("(Intercept)", "xa", "xa:z1")


def test_interaction_recovered():
    ds, spec = otr_data(5000, 1, effect=lambda z1: 0.2 + 1.0 * z1)
    coef = fit_outcome_model(ds, spec).fit.coef_dict()
    assert coef["xa:z1"] == pytest.approx(1.0, abs=0.1)
    assert coef["xa:z2"] == pytest.approx(0.0, abs=0.1)
    assert coef["xa"] == pytest.approx(0.2, abs=0.1)


def test_constant_treatment_rejected():
    ds, spec = otr_data(50, 2)
    ds = Dataset({**ds.columns, "xa": numeric("xa", np.ones(50))})
    with pytest.raises(SchemaError):
        fit_outcome_model(ds, spec)


def test_collinear_interaction_dropped(caplog):
    ds, spec = otr_data(100, 3)
    ds = Dataset({**ds.columns, "z2": numeric("z2", 2 * ds.values("z1"))})
    model = fit_outcome_model(ds, spec)
    assert len(model.columns) == 4
    assert "dropping" in caplog.text


def test_zero_effect_means_zero_weight():
    ds, spec = otr_data(80, 4)
    model = fit_outcome_model(ds, spec)
    beta = model.fit.coefficients.copy()
    beta[[i for i, c in enumerate(model.columns) if c.startswith("xa")]] = 0.0
    labels, weights = predicted_benefit(replace(model, fit=replace(model.fit, coefficients=beta)), ds)
    assert not labels.any()
    np.testing.assert_array_equal(weights, 0.0)


def test_closed_form_benefit():
    ds, spec = otr_data(60, 5, noise=0.0)
    labels, weights = predicted_benefit(fit_outcome_model(ds, spec), ds)
    z1 = ds.values("z1")
    np.testing.assert_allclose(weights, np.abs(0.2 + z1), atol=1e-9)
    np.testing.assert_array_equal(labels, z1 > -0.2)


def test_benefit_equals_mean_difference_binomial():
    ds, spec = otr_data(400, 6, family="binomial")
    model = fit_outcome_model(ds, spec)
    labels, weights = predicted_benefit(model, ds)
    fam = get_family("binomial")
    b = model.fit.coef_dict()
    eta0 = b["(Intercept)"] + b["f"] * ds.values("f")
    eta1 = eta0 + b["xa"] + b["xa:z1"] * ds.values("z1") + b["xa:z2"] * ds.values("z2")
    diff = fam.linkinv(eta1) - fam.linkinv(eta0)
    np.testing.assert_allclose(weights, np.abs(diff), atol=1e-12)
    np.testing.assert_array_equal(labels, diff > 0)


def test_benefit_invariant_to_response_shift():
    ds, spec = otr_data(200, 7)
    shifted = Dataset({**ds.columns, "y": numeric("y", ds.values("y") + 13.0)})
    a = predicted_benefit(fit_outcome_model(ds, spec), ds)
    b = predicted_benefit(fit_outcome_model(shifted, spec), shifted)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], atol=1e-9)


def z_data(n, seed):
    rng = np.random.default_rng(seed)
    return Dataset.from_columns([numeric("z1", rng.standard_normal(n)), numeric("z2", rng.standard_normal(n))])


def test_identical_labels_single_leaf():
    ds = z_data(100, 0)
    tree = fit_weighted_cart(ds, ["z1", "z2"], np.ones(100, bool), np.ones(100))
    assert tree.n_leaves == 1 and otr_regime(tree, ds).all()


def test_step_labels_split_near_zero():
    ds = z_data(400, 1)
    lab = ds.values("z1") > 0
    tree = fit_weighted_cart(ds, ["z1", "z2"], lab, np.ones(400))
    root = tree.nodes[0]
    assert root.variable == "z1" and abs(root.threshold) < 0.1
    assert np.mean(otr_regime(tree, ds) == lab) >= 0.95


def test_heavy_row_classified_correctly():
    ds = z_data(200, 2)
    lab = np.zeros(200, bool)
    lab[17] = True
    w = np.ones(200)
    w[17] = 1e6
    tree = fit_weighted_cart(ds, ["z1", "z2"], lab, w)
    assert otr_regime(tree, ds)[17]


def test_zero_weight_gives_control_leaf():
    ds = z_data(30, 3)
    tree = fit_weighted_cart(ds, ["z1"], np.ones(30, bool), np.zeros(30))
    assert tree.n_leaves == 1 and not otr_regime(tree, ds).any()


def test_ties_go_to_control():
    ds = z_data(4, 4)
    tree = fit_weighted_cart(ds, ["z1"], [True, False, True, False], np.ones(4), cv_folds=0)
    assert not otr_regime(tree, ds.take([0])).any() or tree.n_leaves > 1


def _gini(w0, w1):
    t = w0 + w1
    return t - (w0**2 + w1**2) / t if t > 0 else 0.0


def test_accepted_splits_reduce_impurity():
    ds = z_data(300, 5)
    rng = np.random.default_rng(5)
    lab = (ds.values("z1") + 0.5 * rng.standard_normal(300)) > 0
    tree = fit_weighted_cart(ds, ["z1", "z2"], lab, rng.uniform(0, 2, 300), cv_folds=0)
    for nd in tree.nodes:
        if nd.is_split:
            l, r = tree.nodes[nd.left], tree.nodes[nd.right]
            assert _gini(l.w0, l.w1) + _gini(r.w0, r.w1) < _gini(nd.w0, nd.w1) - 1e-12


def test_pruning_selects_smaller_tree_on_noise():
    ds = z_data(300, 6)
    rng = np.random.default_rng(6)
    lab = rng.random(300) < 0.5
    pruned = fit_weighted_cart(ds, ["z1", "z2"], lab, np.ones(300))
    full = fit_weighted_cart(ds, ["z1", "z2"], lab, np.ones(300), cv_folds=0)
    assert pruned.n_leaves < full.n_leaves
    assert pruned.cv_table


def test_categorical_split_and_unseen_level():
    rng = np.random.default_rng(7)
    g = rng.choice(list("abc"), 300)
    ds = Dataset.from_columns([categorical("g", list(g), ("a", "b", "c"))])
    lab = g == "b"
    tree = fit_weighted_cart(ds, ["g"], lab, np.ones(300))
    assert set(tree.nodes[0].left_levels) in ({"b"}, {"a", "c"})
    new = Dataset.from_columns([categorical("g", ["b", "d"], ("a", "b", "c", "d"))])
    pred = otr_regime(tree, new)
    assert pred[0] and not pred[1]  # unseen "d" follows the heavier (control) side


def test_empty_prediction():
    ds = z_data(100, 8)
    tree = fit_weighted_cart(ds, ["z1"], ds.values("z1") > 0, np.ones(100))
    assert otr_regime(tree, ds, rows=[]).shape == (0,)
    np.testing.assert_array_equal(otr_regime(tree, ds, rows=[3, 1]), otr_regime(tree, ds)[[3, 1]])


def test_fit_otr_end_to_end():
    ds, spec = otr_data(600, 9, effect=lambda z1: np.where(z1 > 0, 1.0, -1.0))
    model = fit_otr(ds, spec)
    reg = otr_regime(model.tree, ds)
    assert np.mean(reg == (ds.values("z1") > 0)) > 0.85
    assert model.n_leaves >= 2
    again = fit_otr(ds, spec)
    np.testing.assert_array_equal(otr_regime(again.tree, ds), reg)


def test_single_leaf_tree_is_constant():
    ds = z_data(10, 9)
    from palmtree.otr import ClassNode
    tree = ClassTree([ClassNode(1.0, 2.0, 10, 0)])
    assert otr_regime(tree, ds).all()
