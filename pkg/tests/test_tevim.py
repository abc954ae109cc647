import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crthte.bart import BartConfig
from crthte.errors import DomainError
from crthte.tevim import PROJECTOR_DEFAULTS, fit_the_fit, knn_projection, tevim

from _oracles import split_candidates


def test_projector_defaults():
    assert (PROJECTOR_DEFAULTS.n_trees, PROJECTOR_DEFAULTS.burn_in, PROJECTOR_DEFAULTS.n_draws) == (50, 500, 500)


def test_knn_projection_by_hand():
    z = np.array([[0.0], [0.9], [2.0], [10.0]])
    t = np.array([1.0, 2.0, 3.0, 4.0])
    # nearest other unit, standardization does not change the order on one axis
    np.testing.assert_allclose(knn_projection(t, z, k=1), [2.0, 1.0, 2.0, 3.0])
    np.testing.assert_allclose(knn_projection(t, np.zeros((4, 0)), k=2), [3.0, 8 / 3, 7 / 3, 2.0])


def test_noise_column_scores_low():
    rng = np.random.default_rng(0)
    z = rng.uniform(-2, 2, size=(200, 2))
    cate = z[:, 0]
    res = tevim(cate, z, projector="knn")
    assert res.scores[1] <= 0.05 * cate.var()


def test_sole_modifier_scores_high():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(200, 3))
    res = tevim(z[:, 1], z, projector="knn")
    assert res.scores[1] >= 0.5 * z[:, 1].var()


@pytest.mark.parametrize("c", [0.0, 3.5, -100.0])
def test_constant_cate_scores_zero(c):
    z = np.random.default_rng(2).normal(size=(30, 4))
    res = tevim(np.full(30, c), z, projector="knn")
    assert np.all(res.scores < 1e-6 * (1 + abs(c)))
    assert res.projector["constant"]


@pytest.mark.parametrize("seed", range(5))
def test_knn_ordering(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(200, 5))
    cate = np.sin(2 * z[:, 0]) + 0.8 * z[:, 2]
    res = tevim(cate, z, projector="knn")
    assert max(res.scores[[1, 3, 4]]) <= min(res.scores[[0, 2]])
    assert res.ranking()[:2] in (["Z1", "Z3"], ["Z3", "Z1"])
    assert set(res.top(2)) == {0, 2}


def test_scores_invariant_to_unit_and_column_order():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(120, 4))
    cate = z[:, 0] * z[:, 1]
    base = tevim(cate, z, projector="knn")
    perm = rng.permutation(120)
    np.testing.assert_allclose(tevim(cate[perm], z[perm], projector="knn").scores, base.scores, rtol=1e-12)
    cols = [2, 0, 3, 1]
    np.testing.assert_allclose(tevim(cate, z[:, cols], projector="knn").scores, base.scores[cols], rtol=1e-12)


def test_bart_projector_ranks_the_modifier_first():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(150, 3))
    cate = 2 * z[:, 1]
    cfg = BartConfig(n_trees=20, burn_in=100, n_draws=100)
    a = tevim(cate, z, projector_cfg=cfg, seed=5)
    b = tevim(cate, z, projector_cfg=cfg, seed=5)
    np.testing.assert_array_equal(a.scores, b.scores)
    assert a.top(1) == [1]
    assert a.projector == {"projector": "bart", "n_trees": 20, "burn_in": 100, "n_draws": 100}


def test_scores_and_contributions_shapes(tmp_path):
    rng = np.random.default_rng(6)
    z = rng.normal(size=(25, 3))
    res = tevim(z[:, 0], z, names=["a", "b", "c"], projector="knn", k=5)
    assert res.contributions.shape == (25, 3)
    assert np.all(res.scores >= 0)
    np.testing.assert_allclose(res.contributions.mean(axis=0), res.scores)
    res.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "tevim.csv", newline="")))
    assert rows[0] == ["covariate", "score"] and [r[0] for r in rows[1:]] == ["a", "b", "c"]
    long = list(csv.reader(open(tmp_path / "tevim_contributions.csv", newline="")))
    assert long[0] == ["unit", "covariate", "contribution"] and len(long) == 1 + 75


def test_tevim_input_checks():
    z = np.zeros((5, 2))
    with pytest.raises(DomainError):
        tevim(np.arange(4.0), z)
    with pytest.raises(DomainError):
        tevim(np.arange(5.0), z, names=["a"])
    with pytest.raises(DomainError):
        tevim(np.arange(5.0), z + np.arange(5)[:, None], projector="lasso")


# ---------------------------------------------------------------- fit the fit


def test_subgroups_constant():
    z = np.random.default_rng(7).normal(size=(40, 2))
    sg = fit_the_fit(np.full(40, 0.3), z)
    assert sg.tree.n_nodes == 1 and sg.node_mean[0] == pytest.approx(0.3)


def test_subgroups_split_on_sex():
    rng = np.random.default_rng(8)
    z = np.column_stack([rng.uniform(20, 80, 100), rng.integers(0, 2, 100), rng.normal(size=100)])
    cate = (z[:, 1] == 1).astype(float)
    best = max(split_candidates(z, cate, min_leaf=7), key=lambda c: c[2])
    sg = fit_the_fit(cate, z, names=["age", "female", "bmi"])
    assert sg.tree.feature[0] == best[0] == 1
    assert sg.to_dict()["feature"] == "female"


def test_subgroups_depth_zero():
    z = np.random.default_rng(9).normal(size=(30, 2))
    sg = fit_the_fit(z[:, 0], z, depth=0)
    assert sg.tree.n_nodes == 1 and sg.node_size[0] == 30


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(10, 80), depth=st.integers(0, 3))
def test_subgroup_sizes_partition(seed, n, depth):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 3))
    cate = z[:, 0] + rng.normal(size=n)
    sg = fit_the_fit(cate, z, depth=depth)
    t = sg.tree
    assert sg.node_size[sg.terminal].sum() == n
    for k in range(t.n_nodes):
        if t.left[k] >= 0:
            assert sg.node_size[t.left[k]] + sg.node_size[t.right[k]] == sg.node_size[k]


def sse(sg, cate, z):
    leaf_mean = sg.tree.predict(z)
    return float(((cate - leaf_mean) ** 2).sum())


def test_sse_monotone_in_depth():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(150, 4))
    cate = np.sin(z[:, 0]) + z[:, 1] * z[:, 2]
    losses = [sse(fit_the_fit(cate, z, depth=d), cate, z) for d in range(5)]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_node_intervals_from_draws(tmp_path):
    rng = np.random.default_rng(11)
    z = rng.integers(0, 2, size=(60, 2)).astype(float)
    cate = 0.5 * z[:, 0]
    draws = cate + rng.normal(0, 0.1, size=(400, 60))
    sg = fit_the_fit(cate, z, cate_draws=draws, depth=1)
    assert np.all(sg.node_lo <= sg.node_mean) and np.all(sg.node_mean <= sg.node_hi)
    left = sg.tree.left[0]
    member = z[:, 0] <= sg.tree.threshold[0]
    lo, hi = np.quantile(draws[:, member].mean(axis=1), [0.025, 0.975])
    assert sg.node_lo[left] == pytest.approx(min(lo, sg.node_mean[left]))
    assert sg.node_hi[left] == pytest.approx(max(hi, sg.node_mean[left]))
    sg.write_json(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["n"] == 60 and {"left", "right", "threshold", "feature"} <= set(doc)
    assert doc["left"]["n"] + doc["right"]["n"] == 60
    assert "left" not in doc["left"]


def test_subgroups_respect_min_leaf():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(50, 2))
    sg = fit_the_fit(z[:, 0] ** 3, z, depth=3, min_leaf=7)
    assert sg.node_size[sg.terminal].min() >= 7


def test_subgroups_shape_check():
    with pytest.raises(DomainError):
        fit_the_fit(np.zeros(5), np.zeros((4, 2)))
