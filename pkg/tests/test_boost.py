import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crthte.boost import (
    BoostConfig,
    _newton_leaves,
    _variance_step,
    cate_boost,
    fit_boost,
    fit_gpboost,
    fit_megb,
    gls_gradient,
)
from crthte.data import ClusteredDataset, VarianceComponents, cluster_sums
from crthte.dgp import ScenarioSpec, generate
from crthte.errors import DomainError
from crthte.tree import grow_cart


def block_cov(sizes, sb2, s2):
    n = sum(sizes)
    om = np.zeros((n, n))
    start = 0
    for k in sizes:
        om[start:start + k, start:start + k] = sigma_block(k, sb2, s2)
        start += k
    return om


def sigma_block(k, sb2, s2):
    return s2 * np.eye(k) + sb2 * np.ones((k, k))


instances = dict(
    sizes=st.lists(st.integers(1, 8), min_size=1, max_size=4),
    sb2=st.floats(0.0, 3.0),
    s2=st.floats(0.05, 3.0),
    seed=st.integers(0, 2**31 - 1),
)


@settings(max_examples=100, deadline=None)
@given(**instances)
def test_gls_gradient_matches_dense(sizes, sb2, s2, seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=sum(sizes))
    cid = np.repeat(np.arange(len(sizes)), sizes)
    got = gls_gradient(r, cid, len(sizes), VarianceComponents(sb2, s2))
    np.testing.assert_allclose(got, np.linalg.solve(block_cov(sizes, sb2, s2), r), rtol=1e-9, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(**instances, n_leaves=st.integers(1, 4), l2=st.floats(0.0, 2.0))
def test_newton_leaves_match_dense_gls(sizes, sb2, s2, seed, n_leaves, l2):
    rng = np.random.default_rng(seed)
    n = sum(sizes)
    cid = np.repeat(np.arange(len(sizes)), sizes)
    leaf = rng.integers(0, n_leaves, n)
    leaf[: min(n, n_leaves)] = np.arange(min(n, n_leaves))
    if len(np.unique(leaf)) < n_leaves:
        return
    r = rng.normal(size=n)
    vc = VarianceComponents(sb2, s2)
    g = gls_gradient(r, cid, len(sizes), vc)
    got = _newton_leaves(leaf, n_leaves, g, cid, len(sizes), vc, l2)
    H = np.eye(n_leaves)[leaf]
    oinv = np.linalg.inv(block_cov(sizes, sb2, s2))
    want = np.linalg.solve(H.T @ oinv @ H + l2 * np.eye(n_leaves), H.T @ oinv @ r)
    np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(**instances)
def test_variance_step_never_worse(sizes, sb2, s2, seed):
    rng = np.random.default_rng(seed)
    cid = np.repeat(np.arange(len(sizes)), sizes)
    r = rng.normal(0, 1, len(sizes))[cid] + rng.normal(size=cid.size)
    cnt, s, ss = cluster_sums(r, cid, len(sizes))
    _, before, after = _variance_step(cnt, s, ss, VarianceComponents(sb2, s2), None)
    assert after <= before + 1e-8


# ---------------------------------------------------------------- GPB


def test_gpb_no_clustering_drives_sigma_b2_to_zero():
    truth = generate(ScenarioSpec("HS1", n_clusters=30, expected_cluster_size=33, icc=0.0, seed=21))
    model = fit_gpboost(truth.dataset, BoostConfig("GPB", rounds=300), seed=1)
    assert model.vc.sigma_b2 < 0.02


def test_gpb_descent_on_linear_signal():
    rng = np.random.default_rng(0)
    I, m = 20, 15
    cid = np.repeat(np.arange(I), m)
    x = rng.normal(size=(cid.size, 2))
    y = 2 * x[:, 0] + rng.normal(0, 0.3, I)[cid] + rng.normal(0, 1, cid.size)
    data = ClusteredDataset(cid, (np.arange(I) % 2)[cid], y, x, np.zeros((cid.size, 0)))
    model = fit_gpboost(data, BoostConfig("GPB", rounds=200, min_leaf=10), seed=0)
    assert model.trace[-1]["L_RE"] < model.trace[0]["L_RE"]


def test_gpb_variance_step_slack_every_round():
    truth = generate(ScenarioSpec("HS1", n_clusters=20, expected_cluster_size=30, seed=22))
    model = fit_gpboost(truth.dataset, BoostConfig("GPB", rounds=150, min_leaf=30), seed=0)
    for t in model.trace[1:]:
        assert t["L_RE_after"] <= t["L_RE_before"] + 1e-8


def test_gpb_intercept_variance_on_hs1():
    truth = generate(ScenarioSpec("HS1", n_clusters=30, expected_cluster_size=33, seed=21))
    ds = truth.dataset
    model = fit_gpboost(ds, BoostConfig("GPB", rounds=300), seed=1)
    assert 0.02 <= model.vc.sigma_b2 <= 0.3
    # profile likelihood on the true fixed-effect residuals agrees on the range
    r = ds.outcome - truth.f0_true - ds.treatment * truth.tau_true
    cnt, s, ss = cluster_sums(r, ds.cluster_id, ds.n_clusters)
    vc = VarianceComponents(0.5, 0.5)
    for _ in range(5):
        vc, _, _ = _variance_step(cnt, s, ss, vc, None)
    assert 0.02 <= vc.sigma_b2 <= 0.3


def test_gpb_beats_constant_effect_on_hs2():
    truth = generate(ScenarioSpec("HS2", n_clusters=30, expected_cluster_size=33, seed=21))
    ds = truth.dataset
    tau_hat = cate_boost(fit_gpboost(ds, BoostConfig("GPB", rounds=300), seed=1), ds.x, ds.v)
    pehe = np.sqrt(np.mean((tau_hat - truth.tau_true) ** 2))
    baseline = np.sqrt(np.mean((truth.tau_true.mean() - truth.tau_true) ** 2))
    assert np.isfinite(pehe) and pehe < baseline


def test_gpb_gradient_leaves_option():
    truth = generate(ScenarioSpec("HS1", n_clusters=10, expected_cluster_size=20, seed=23))
    model = fit_gpboost(truth.dataset, BoostConfig("GPB", rounds=20, min_leaf=10, leaf_mode="gradient"), seed=0)
    assert len(model.trees) == 20 and np.isfinite(model.trace[-1]["L_RE"])


# ---------------------------------------------------------------- MEGB


def test_megb_interpolates_in_one_full_step():
    rng = np.random.default_rng(1)
    n = 40
    cid = np.repeat(np.arange(4), 10)
    x = rng.normal(size=(n, 3))
    y = rng.normal(size=n)
    data = ClusteredDataset(cid, (np.arange(4) % 2)[cid], y, x, np.zeros((n, 0)))
    cfg = BoostConfig("MEGB", rounds=1, learning_rate=1.0, max_depth=40, min_leaf=1, fix_sigma_b2=0.0)
    model = fit_megb(data, cfg, seed=0)
    np.testing.assert_allclose(model.predict(data.design()), y, atol=1e-12)


def test_megb_null_effects_are_smaller():
    for s in range(3):
        null = generate(ScenarioSpec("HS1", n_clusters=30, expected_cluster_size=33, constant_effect=0.0, seed=30 + s))
        hs1 = generate(ScenarioSpec("HS1", n_clusters=30, expected_cluster_size=33, seed=30 + s))
        a = np.abs(cate_boost(fit_megb(null.dataset, seed=1), null.dataset.x, null.dataset.v)).mean()
        b = np.abs(cate_boost(fit_megb(hs1.dataset, seed=1), hs1.dataset.x, hs1.dataset.v)).mean()
        assert a < b


def test_megb_variance_step_descends():
    truth = generate(ScenarioSpec("HS1", n_clusters=20, expected_cluster_size=30, seed=24))
    model = fit_megb(truth.dataset, BoostConfig("MEGB", rounds=200), seed=0)
    for t in model.trace:
        assert t["L_RE"] <= t["L_RE_before"] + 1e-9 * abs(t["L_RE_before"])


def test_megb_pinned_zero_is_plain_boosting():
    truth = generate(ScenarioSpec("HS2", n_clusters=12, expected_cluster_size=20, seed=25))
    ds = truth.dataset
    cfg = BoostConfig("MEGB", rounds=50, fix_sigma_b2=0.0)
    model = fit_megb(ds, cfg, seed=0)
    x = ds.design()
    f = np.full(ds.n, ds.outcome.mean())
    for _ in range(50):
        f = f + cfg.learning_rate * grow_cart(x, ds.outcome - f, cfg.max_depth, cfg.min_leaf).predict(x)
    assert np.all(model.intercepts == 0.0)
    np.testing.assert_allclose(model.predict(x), f, atol=1e-12)


def test_larger_step_fits_training_data_faster():
    truth = generate(ScenarioSpec("HS1", n_clusters=30, expected_cluster_size=33, seed=40))
    loss = {nu: fit_megb(truth.dataset, BoostConfig("MEGB", learning_rate=nu, rounds=200), seed=0).trace[-1]["L_RE"]
            for nu in (0.05, 0.1)}
    assert loss[0.1] < loss[0.05]


# ---------------------------------------------------------------- shared


def test_contrast_without_arm_splits_is_zero():
    truth = generate(ScenarioSpec("HS1", n_clusters=8, expected_cluster_size=10, seed=26))
    model = fit_megb(truth.dataset, BoostConfig("MEGB", rounds=5, max_depth=0), seed=0)
    assert np.all(cate_boost(model, truth.dataset.x, truth.dataset.v) == 0.0)


@pytest.mark.parametrize("variant", ["GPB", "MEGB"])
def test_contrast_ignores_cluster_labels(variant):
    truth = generate(ScenarioSpec("HS1", n_clusters=12, expected_cluster_size=20, seed=27))
    ds = truth.dataset
    perm = np.random.default_rng(0).permutation(ds.n_clusters)
    relabeled = ClusteredDataset(perm[ds.cluster_id], ds.treatment, ds.outcome, ds.x, ds.v)
    cfg = BoostConfig(variant, rounds=40, min_leaf=20)
    a = cate_boost(fit_boost(ds, cfg, 0), ds.x, ds.v)
    b = cate_boost(fit_boost(relabeled, cfg, 0), ds.x, ds.v)
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_trace_csv(tmp_path):
    truth = generate(ScenarioSpec("HS1", n_clusters=8, expected_cluster_size=10, seed=28))
    model = fit_megb(truth.dataset, BoostConfig("MEGB", rounds=7), seed=0)
    model.write_trace(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv", newline="")))
    assert rows[0] == ["round", "L_RE", "sigma_b2", "sigma2"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 8))


def test_config_defaults_and_validation():
    g, m = BoostConfig("GPB"), BoostConfig("MEGB")
    assert (g.rounds, g.learning_rate, g.max_depth, g.min_leaf) == (2000, 0.1, 4, 100)
    assert (m.rounds, m.learning_rate, m.max_depth, m.min_leaf) == (500, 0.05, 2, 5)
    for kw in (dict(learning_rate=0.0), dict(learning_rate=1.5), dict(rounds=0), dict(variant="XGB"), dict(l2_leaf=-1)):
        with pytest.raises(DomainError):
            BoostConfig(**kw)
    data = generate(ScenarioSpec("HS1", n_clusters=4, expected_cluster_size=5)).dataset
    with pytest.raises(DomainError):
        fit_gpboost(data, BoostConfig("MEGB"))
    with pytest.raises(DomainError):
        fit_megb(data, BoostConfig("GPB"))
