import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crthte.data import ClusteredDataset, VarianceComponents, cluster_sums, gaussian_working_loss
from crthte.dgp import ScenarioSpec, generate
from crthte.ensembles import (
    CfConfig,
    MerfConfig,
    _forest_solve,
    _leaf_moments,
    _nuisance_oob,
    blup_intercepts,
    cate_merf,
    em_variance_step,
    fit_causal_forest,
    fit_merf,
)
from crthte.errors import DomainError
from crthte.rng import as_generator, kernel_seed, substream
from crthte.tree import grow_forest

from _oracles import dense_gls_intercepts, dense_loss


def intercept_only(I=30, m=30, sb2=1.0, s2=1.0, seed=0):
    """f = 0, large random intercepts, alternating arms."""
    rng = np.random.default_rng(seed)
    cid = np.repeat(np.arange(I), m)
    b = rng.normal(0, np.sqrt(sb2), I)
    y = b[cid] + rng.normal(0, np.sqrt(s2), cid.size)
    arm = (np.arange(I) % 2)[cid]
    x = rng.normal(size=(cid.size, 2))
    return ClusteredDataset(cid, arm, y, x, np.zeros((cid.size, 0))), b


# ---------------------------------------------------------------- BLUP


def test_blup_half_weight():
    out = blup_intercepts([np.ones(9)], VarianceComponents(0.1, 0.9))
    assert out[0] == pytest.approx(0.5, abs=1e-15)


def test_blup_zero_variance():
    r = [np.arange(3.0), np.array([5.0, -1.0])]
    assert np.all(blup_intercepts(r, VarianceComponents(0.0, 1.0)) == 0.0)


def test_blup_large_cluster_limit():
    r = np.full(10**6, 0.7)
    out = blup_intercepts([r], VarianceComponents(0.1, 0.9))
    assert abs(out[0] - 0.7) < 1e-5


def test_blup_needs_positive_sigma2():
    with pytest.raises(DomainError):
        blup_intercepts([np.ones(2)], VarianceComponents(0.1, 0.0))


@settings(max_examples=200, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 12), min_size=1, max_size=5),
    sb2=st.floats(1e-3, 5.0),
    s2=st.floats(1e-2, 5.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_blup_matches_dense_gls(sizes, sb2, s2, seed):
    rng = np.random.default_rng(seed)
    r = [rng.normal(0, 2, k) for k in sizes]
    got = blup_intercepts(r, VarianceComponents(sb2, s2))
    np.testing.assert_allclose(got, dense_gls_intercepts(r, sb2, s2), rtol=1e-9, atol=1e-12)


def test_em_step_single_cluster_uses_shrunken_mean():
    r = np.array([0.4, 1.0, -0.2, 2.2])
    vc = VarianceComponents(0.3, 0.8)
    cnt, s, ss = cluster_sums(r, np.zeros(4, dtype=np.int64), 1)
    b, _ = em_variance_step(cnt, s, ss, vc)
    w = 0.3 / (0.3 + 0.8 / 4)
    assert b[0] == pytest.approx(w * r.mean(), abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 12), min_size=1, max_size=5),
    sb2=st.floats(1e-3, 5.0),
    s2=st.floats(1e-2, 5.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_em_step_never_increases_loss(sizes, sb2, s2, seed):
    rng = np.random.default_rng(seed)
    r = [rng.normal(rng.normal(), 1.5, k) for k in sizes]
    cid = np.repeat(np.arange(len(sizes)), sizes)
    cnt, s, ss = cluster_sums(np.concatenate(r), cid, len(sizes))
    _, new = em_variance_step(cnt, s, ss, VarianceComponents(sb2, s2))
    old_loss = dense_loss(r, sb2, s2)
    assert dense_loss(r, new.sigma_b2, new.sigma2) <= old_loss + 1e-9 * abs(old_loss)


# ---------------------------------------------------------------- MERF


def test_merf_recovers_intercept_variance():
    data, b = intercept_only(sb2=1.0, seed=1)
    model = fit_merf(data, MerfConfig(n_trees=50), seed=substream(1))
    assert 0.5 <= model.vc.sigma_b2 / 1.0 <= 2.0
    # the marginal-likelihood optimum on the raw outcomes lands in the same place
    from scipy.optimize import minimize

    groups = [data.outcome[data.cluster_id == c] - data.outcome.mean() for c in range(data.n_clusters)]
    res = minimize(lambda t: dense_loss(groups, np.exp(t[0]), np.exp(t[1])), [0.0, 0.0], method="Nelder-Mead")
    assert 0.5 <= model.vc.sigma_b2 / np.exp(res.x[0]) <= 2.0


def test_merf_descent_every_iteration():
    truth = generate(ScenarioSpec("HS1", n_clusters=20, expected_cluster_size=30, seed=2))
    model = fit_merf(truth.dataset, MerfConfig(n_trees=60, max_em_iter=25), seed=substream(2))
    assert len(model.trace) >= 2
    for t in model.trace:
        assert t["L_RE"] <= t["L_RE_before"] + 1e-9 * abs(t["L_RE_before"])


def test_merf_pinned_zero_is_plain_forest():
    truth = generate(ScenarioSpec("HS2", n_clusters=12, expected_cluster_size=20, seed=3))
    data = truth.dataset
    cfg = MerfConfig(n_trees=40, fix_sigma_b2=0.0, max_em_iter=3)
    model = fit_merf(data, cfg, seed=7)
    assert np.all(model.intercepts == 0.0)
    rng = as_generator(7)
    x = data.design()
    blocks = [rng.integers(0, data.n, data.n) for _ in range(40)]
    plain = grow_forest(x, data.outcome, blocks, cfg.max_depth, cfg.min_leaf, -(-x.shape[1] // 3), kernel_seed(rng))
    np.testing.assert_array_equal(model.predict(x), plain.predict(x))


def test_merf_trace_csv(tmp_path):
    data, _ = intercept_only(I=10, m=10, seed=4)
    model = fit_merf(data, MerfConfig(n_trees=20, max_em_iter=5), seed=4)
    path = tmp_path / "trace.csv"
    model.write_trace(path)
    rows = list(csv.reader(open(path, newline="")))
    assert rows[0] == ["round", "L_RE", "sigma_b2", "sigma2"]
    assert len(rows) == len(model.trace) + 1
    assert float(rows[-1][1]) == model.trace[-1]["L_RE"]


def test_merf_unconverged_is_flagged():
    data, _ = intercept_only(I=10, m=10, seed=5)
    model = fit_merf(data, MerfConfig(n_trees=10, max_em_iter=1), seed=5)
    assert model.converged is False and len(model.trace) == 1


def test_merf_config_validation():
    with pytest.raises(DomainError):
        MerfConfig(tol=0)
    with pytest.raises(DomainError):
        MerfConfig(n_trees=0)
    data, _ = intercept_only(I=4, m=4)
    with pytest.raises(DomainError):
        fit_merf(data, MerfConfig(n_trees=2, mtry=99))


def test_cate_merf_without_splits_is_zero():
    truth = generate(ScenarioSpec("HS1", n_clusters=8, expected_cluster_size=10, seed=6))
    model = fit_merf(truth.dataset, MerfConfig(n_trees=5, max_depth=0, max_em_iter=2), seed=6)
    assert np.all(cate_merf(model, truth.dataset.x, truth.dataset.v) == 0.0)


def test_cate_merf_shift_invariant():
    truth = generate(ScenarioSpec("HS1", n_clusters=10, expected_cluster_size=20, seed=7))
    ds = truth.dataset
    cfg = MerfConfig(n_trees=30, max_em_iter=5)
    a = cate_merf(fit_merf(ds, cfg, seed=8), ds.x, ds.v)
    b = cate_merf(fit_merf(ds.with_outcome(ds.outcome + 5.0), cfg, seed=8), ds.x, ds.v)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_cate_merf_constant_effect():
    truth = generate(ScenarioSpec("HS1", n_clusters=60, expected_cluster_size=40, constant_effect=1.0, seed=9))
    ds = truth.dataset
    # the arm is cluster-level, so with thin feature subsampling the intercepts
    # absorb it before the forest splits on it; offer A to every split
    model = fit_merf(ds, MerfConfig(n_trees=200, mtry=ds.design().shape[1]), seed=9)
    assert abs(cate_merf(model, ds.x, ds.v).mean() - 1.0) < 0.3


# ---------------------------------------------------------------- causal forest


def small_cf(**kw):
    base = dict(n_trees=400, nuisance_trees=200)
    base.update(kw)
    return CfConfig(**base)


@pytest.fixture(scope="module")
def cf_fit():
    truth = generate(ScenarioSpec("HS1", n_clusters=20, expected_cluster_size=15, seed=10))
    return truth, fit_causal_forest(truth.dataset, small_cf(), seed=10)


def forest_weights(cf, zq):
    """Kernel weights over training rows at one query, built directly from leaf co-membership."""
    nodes = cf.forest.apply(cf.z)
    q = cf.forest.apply(zq[None, :])[:, 0]
    alpha = np.zeros(cf.z.shape[0])
    used = 0
    for b, est in enumerate(cf.estimation_rows):
        same = est[nodes[b, est] == q[b]]
        arms = cf.arm[same]
        if same.size == 0 or arms.min() == arms.max():
            continue
        alpha[same] += cf.weight[same] / cf.weight[same].sum()
        used += 1
    return alpha / used


def test_cf_weights_normalized_and_reproduce_estimate(cf_fit):
    _, cf = cf_fit
    queries = cf.z[:5] + 0.01
    est = cf.predict(queries)
    for j, zq in enumerate(queries):
        alpha = forest_weights(cf, zq)
        assert np.all(alpha >= 0)
        assert alpha.sum() == pytest.approx(1.0, abs=1e-12)
        # solving the weighted moment equation from the weights gives the same estimate
        tau = (alpha * cf.wres * cf.yres).sum() / (alpha * cf.wres**2).sum()
        assert est.point[j] == pytest.approx(tau, abs=1e-10)


def test_cf_toy_moment_solve():
    # two clusters of four rows, one tree with two leaves
    wres = np.array([0.5, 0.5, 0.5, 0.5, -0.5, -0.5, -0.5, -0.5])
    yres = np.array([1.0, 2.0, 0.5, 3.0, -1.0, 0.0, 0.5, -2.0])
    arm = (wres > 0).astype(np.int64)
    weight = np.array([1.0, 2.0, 1.0, 1.0, 0.5, 1.0, 3.0, 1.0])
    nodes = np.array([[1, 1, 2, 2, 1, 1, 2, 2]])
    flat = np.arange(8, dtype=np.int64)
    off = np.array([0, 8], dtype=np.int64)
    mom = _leaf_moments(nodes, flat, off, wres, yres, weight, arm, 3)
    qnodes = np.array([[1, 2]])
    tau, *_ = _forest_solve(qnodes, *mom, np.ones((1, 2), dtype=np.bool_), 1)
    for k, leaf in enumerate((1, 2)):
        rows = nodes[0] == leaf
        sw = np.sqrt(weight[rows])
        coef, *_ = np.linalg.lstsq((sw * wres[rows])[:, None], sw * yres[rows], rcond=None)
        assert tau[k] == pytest.approx(coef[0], abs=1e-12)


def test_cf_honest_halves_are_disjoint(cf_fit):
    truth, cf = cf_fit
    cid = truth.dataset.cluster_id
    for cl, s, e in zip(cf.tree_clusters, cf.structure_rows, cf.estimation_rows):
        assert not set(s) & set(e)
        assert not set(cid[s]) & set(cid[e])
        assert set(cid[s]) | set(cid[e]) == set(cl)


def test_cf_estimation_rows_do_not_move_splits(cf_fit):
    _, cf = cf_fit
    struct = cf.structure_rows[:6]
    est0 = cf.estimation_rows[0]
    y2 = cf.yres.copy()
    y2[est0] += np.random.default_rng(0).normal(0, 50, est0.size)
    kw = dict(treatment_residual=cf.wres, arm=cf.arm, min_arm_frac=cf.cfg.imbalance)
    a = grow_forest(cf.z, cf.yres, struct, None, 5, cf.z.shape[1], 11, **kw)
    b = grow_forest(cf.z, y2, struct, None, 5, cf.z.shape[1], 11, **kw)
    t_a, t_b = a.tree(0), b.tree(0)
    np.testing.assert_array_equal(t_a.feature, t_b.feature)
    np.testing.assert_array_equal(t_a.threshold, t_b.threshold)


def test_nuisance_is_cluster_out_of_bag():
    truth = generate(ScenarioSpec("HS1", n_clusters=12, expected_cluster_size=10, seed=12))
    ds = truth.dataset
    z = np.ascontiguousarray(ds.covariates())
    cfg = small_cf(nuisance_trees=100)
    c = 3
    rows = ds.cluster_id == c
    y2 = ds.outcome.copy()
    y2[rows] += 100.0
    a, clusters = _nuisance_oob(z, ds.outcome, ds.cluster_id, ds.n_clusters, cfg, substream(1))
    b, _ = _nuisance_oob(z, y2, ds.cluster_id, ds.n_clusters, cfg, substream(1))
    np.testing.assert_array_equal(a[rows], b[rows])
    assert not np.allclose(a[~rows], b[~rows])
    assert any(c not in cl for cl in clusters)


def test_cf_oob_excludes_own_cluster(cf_fit):
    truth, cf = cf_fit
    oob = cf.predict()
    full = cf.predict(cf.z)
    assert not np.allclose(oob.point, full.point)
    # rebuild the out-of-bag estimate for one row from admissible trees only
    j = 0
    mask = [truth.dataset.cluster_id[j] not in cl for cl in cf.tree_clusters]
    nodes = cf.forest.apply(cf.z)
    num = den = 0.0
    for b in np.flatnonzero(mask):
        est = cf.estimation_rows[b]
        same = est[nodes[b, est] == nodes[b, j]]
        if same.size == 0 or cf.arm[same].min() == cf.arm[same].max():
            continue
        w = cf.weight[same] / cf.weight[same].sum()
        num += (w * cf.wres[same] * cf.yres[same]).sum()
        den += (w * cf.wres[same] ** 2).sum()
    assert oob.point[j] == pytest.approx(num / den, abs=1e-10)


def test_cf_constant_effect_coverage():
    truth = generate(ScenarioSpec("HS1", n_clusters=60, expected_cluster_size=25, constant_effect=1.0, seed=13))
    est = fit_causal_forest(truth.dataset, CfConfig(n_trees=1000), seed=13).predict()
    assert np.mean((est.lo95 <= 1.0) & (1.0 <= est.hi95)) >= 0.9


def test_cf_cluster_weighting_changes_weights():
    truth = generate(ScenarioSpec("HS1", n_clusters=12, expected_cluster_size=15, seed=14))
    cf = fit_causal_forest(truth.dataset, small_cf(n_trees=50, cluster_weighted=True), seed=14)
    np.testing.assert_allclose(cf.weight, 1.0 / truth.dataset.cluster_sizes[truth.dataset.cluster_id])
    est = cf.predict()
    assert np.all(est.extras["variance"] >= 0)


def test_cf_config_validation():
    for kw in (dict(honesty_fraction=1.0), dict(subsample_rate=0.0), dict(nuisance="x"), dict(n_trees=1)):
        with pytest.raises(DomainError):
            CfConfig(**kw)


def test_cf_crossfit_nuisance_runs():
    truth = generate(ScenarioSpec("HS1", n_clusters=12, expected_cluster_size=15, seed=15))
    est = fit_causal_forest(truth.dataset, small_cf(n_trees=50, nuisance="crossfit", nuisance_trees=30), seed=15).predict()
    assert np.all(np.isfinite(est.point))


def test_merf_trace_matches_working_loss():
    # working loss from the data module is the oracle for the MERF trace
    data, _ = intercept_only(I=6, m=5, seed=16)
    model = fit_merf(data, MerfConfig(n_trees=10, max_em_iter=3), seed=16)
    r = data.outcome - model.predict(data.design())
    groups = [r[data.cluster_id == c] for c in range(data.n_clusters)]
    assert gaussian_working_loss(groups, model.vc) == pytest.approx(model.trace[-1]["L_RE"], rel=1e-9)
