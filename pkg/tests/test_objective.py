import numpy as np
import pytest

from oracles import finite_difference_gradient, relative_error
from owtt.adapter import AdapterState, embed_batch
from owtt.errors import NumericalFailure, UnknownLabel
from owtt.objective import (
    GaussianStats,
    LossBundle,
    clustering_loss,
    clustering_loss_gradient,
    fit_gaussian,
    kl_divergence,
    kl_gradient,
    update_target_stats,
)
from owtt.prototypes import PrototypePool

DELTA = 0.1


def make_adapter(weight):
    weight = np.asarray(weight, dtype=float)
    return AdapterState(
        weight=weight,
        momentum_buffer=np.zeros_like(weight),
        learning_rate=0.1,
        momentum_coeff=0.9,
    )


def unit_rows(mat):
    mat = np.asarray(mat, dtype=float)
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def random_instance(seed, d_in=6, d_out=4, k_s=3, n=8, n_novel=2):
    rng = np.random.default_rng(seed)
    adapter = make_adapter(rng.normal(size=(d_out, d_in)))
    raw = rng.normal(size=(n, d_in)) * 2.0
    pool = PrototypePool(unit_rows(rng.normal(size=(k_s, d_out))), novel_capacity=10)
    for _ in range(n_novel):
        pool.push_novel(unit_rows(rng.normal(size=(1, d_out)))[0])
    labels = rng.integers(0, k_s + n_novel, size=n)
    return adapter, raw, pool, labels


# --- clustering loss -------------------------------------------------------------


def test_loss_zero_for_single_prototype_match():
    pool = PrototypePool(np.array([[1.0, 0.0]]), novel_capacity=4)
    loss = clustering_loss(np.array([[1.0, 0.0]]), [0], pool, DELTA)
    assert loss == pytest.approx(0.0)


def test_loss_hand_softmax_two_prototypes():
    pool = PrototypePool(np.eye(2), novel_capacity=4)
    loss = clustering_loss(np.array([[1.0, 0.0]]), [0], pool, DELTA)
    assert loss == pytest.approx(np.log1p(np.exp(-10.0)))


def test_loss_novel_term_mirrors_source_term():
    pool = PrototypePool(np.array([[1.0, 0.0]]), novel_capacity=4)
    pool.push_novel(np.array([0.0, 1.0]))
    loss = clustering_loss(np.array([[0.0, 1.0]]), [1], pool, DELTA)
    assert loss == pytest.approx(np.log1p(np.exp(-10.0)))


def test_loss_averages_over_samples():
    pool = PrototypePool(np.eye(2), novel_capacity=4)
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    per_sample = clustering_loss(feats[:1], [0], pool, DELTA)
    both = clustering_loss(feats, [0, 1], pool, DELTA)
    assert both == pytest.approx(per_sample)


def test_loss_unknown_novel_index_raises():
    pool = PrototypePool(np.eye(2), novel_capacity=4)
    with pytest.raises(UnknownLabel):
        clustering_loss(np.array([[1.0, 0.0]]), [2], pool, DELTA)


def test_loss_rotation_invariant():
    rng = np.random.default_rng(12)
    adapter, raw, pool, labels = random_instance(12)
    feats = embed_batch(raw, adapter)
    base = clustering_loss(feats, labels, pool, DELTA)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    rotated_pool = PrototypePool(pool.source_matrix() @ q.T, novel_capacity=10)
    for i in range(pool.novel_count):
        rotated_pool.push_novel(q @ pool.novel_at(i))
    rotated = clustering_loss(feats @ q.T, labels, rotated_pool, DELTA)
    assert rotated == pytest.approx(base, rel=1e-12)


# --- clustering gradient ----------------------------------------------------------


def test_gradient_vanishes_at_exact_minimum():
    adapter = make_adapter(np.eye(2))
    raw = np.array([[2.0, 0.0]])
    pool = PrototypePool(np.array([[1.0, 0.0]]), novel_capacity=4)
    feats = embed_batch(raw, adapter)
    grad = clustering_loss_gradient(feats, [0], pool, DELTA, adapter, raw)
    assert np.linalg.norm(grad) < 1e-8


def test_gradient_empty_batch_is_zero_matrix():
    adapter = make_adapter(np.eye(2))
    pool = PrototypePool(np.eye(2), novel_capacity=4)
    grad = clustering_loss_gradient(
        np.empty((0, 2)), [], pool, DELTA, adapter, np.empty((0, 2))
    )
    np.testing.assert_array_equal(grad, np.zeros((2, 2)))


def test_gradient_matches_finite_differences():
    adapter, raw, pool, labels = random_instance(seed=0)
    feats = embed_batch(raw, adapter)
    analytic = clustering_loss_gradient(feats, labels, pool, DELTA, adapter, raw)

    def loss_of(weight):
        probe = make_adapter(weight)
        return clustering_loss(embed_batch(raw, probe), labels, pool, DELTA)

    numeric = finite_difference_gradient(loss_of, adapter.weight, step=1e-5)
    assert relative_error(analytic, numeric) < 1e-4


# --- streaming target statistics ---------------------------------------------------


def test_first_batch_initializes_stats_exactly():
    rng = np.random.default_rng(3)
    batch = rng.normal(size=(10, 3))
    stats = update_target_stats(GaussianStats.empty(3, momentum=0.1), batch)
    assert stats.initialized
    assert stats.last_blend == 1.0
    np.testing.assert_allclose(stats.mean, batch.mean(axis=0))
    np.testing.assert_allclose(stats.covariance, np.cov(batch.T, ddof=1))


def test_single_sample_batch_uses_zero_covariance():
    stats = update_target_stats(GaussianStats.empty(2, momentum=0.1), np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(stats.covariance, np.zeros((2, 2)))


def test_momentum_one_replaces_stats():
    rng = np.random.default_rng(4)
    stats = update_target_stats(GaussianStats.empty(2, momentum=1.0), rng.normal(size=(6, 2)))
    batch = rng.normal(size=(8, 2))
    stats = update_target_stats(stats, batch)
    np.testing.assert_allclose(stats.mean, batch.mean(axis=0))
    np.testing.assert_allclose(stats.covariance, np.cov(batch.T, ddof=1))


def test_half_momentum_blends_means():
    stats = update_target_stats(GaussianStats.empty(1, momentum=0.5), np.array([[0.0], [0.0]]))
    stats = update_target_stats(stats, np.array([[2.0], [2.0]]))
    assert stats.mean[0] == pytest.approx(1.0)
    assert stats.last_blend == 0.5


def test_empty_batch_is_noop():
    stats = update_target_stats(GaussianStats.empty(2, momentum=0.2), np.empty((0, 2)))
    assert not stats.initialized


def test_covariance_stays_symmetric_across_updates():
    rng = np.random.default_rng(8)
    stats = GaussianStats.empty(4, momentum=0.3)
    for _ in range(10):
        stats = update_target_stats(stats, rng.normal(size=(7, 4)))
        np.testing.assert_allclose(stats.covariance, stats.covariance.T, atol=1e-12)


# --- KL divergence ------------------------------------------------------------------


def gaussian(mean, cov):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    return GaussianStats(mean=mean, covariance=cov, initialized=True, momentum=0.1)


def test_kl_self_divergence_is_zero():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(5, 3))
    stats = fit_gaussian(a, momentum=0.1)
    assert kl_divergence(stats, stats) == pytest.approx(0.0, abs=1e-10)


def test_kl_one_dimensional_mean_shift():
    source = gaussian([0.0], [[1.0]])
    target = gaussian([1.0], [[1.0]])
    assert kl_divergence(source, target) == pytest.approx(0.5, abs=1e-3)


def test_kl_isotropic_variance_ratio():
    source = gaussian([0.0, 0.0], np.eye(2))
    target = gaussian([0.0, 0.0], 2.0 * np.eye(2))
    expected = 0.5 * (1.0 - 2.0 + np.log(4.0))
    assert kl_divergence(source, target) == pytest.approx(expected, abs=1e-3)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(21)
    for _ in range(20):
        a = fit_gaussian(rng.normal(size=(30, 4)), momentum=0.1)
        b = fit_gaussian(rng.normal(size=(30, 4)) * rng.uniform(0.5, 2), momentum=0.1)
        assert kl_divergence(a, b) >= 0.0


def test_kl_rejects_non_positive_definite():
    source = gaussian([0.0, 0.0], np.eye(2))
    bad = gaussian([0.0, 0.0], np.array([[1.0, 0.0], [0.0, -5.0]]))
    with pytest.raises(NumericalFailure):
        kl_divergence(source, bad)


# --- KL gradient ---------------------------------------------------------------------


def kl_after_update(weight, raw, prev_stats, source):
    probe = make_adapter(weight)
    feats = embed_batch(raw, probe)
    updated = update_target_stats(prev_stats, feats)
    return kl_divergence(source, updated)


def test_kl_gradient_matches_finite_differences_fresh_stats():
    rng = np.random.default_rng(1)
    adapter = make_adapter(rng.normal(size=(4, 6)))
    raw = rng.normal(size=(8, 6)) * 2.0
    source = fit_gaussian(unit_rows(rng.normal(size=(40, 4))), momentum=0.05)
    prev = GaussianStats.empty(4, momentum=0.05)

    feats = embed_batch(raw, adapter)
    target = update_target_stats(prev, feats)
    analytic = kl_gradient(source, target, feats, adapter, raw)
    numeric = finite_difference_gradient(
        lambda w: kl_after_update(w, raw, prev, source), adapter.weight, step=1e-5
    )
    assert relative_error(analytic, numeric) < 1e-4


def test_kl_gradient_matches_finite_differences_running_stats():
    rng = np.random.default_rng(2)
    adapter = make_adapter(rng.normal(size=(4, 6)))
    raw = rng.normal(size=(8, 6)) * 2.0
    source = fit_gaussian(unit_rows(rng.normal(size=(40, 4))), momentum=0.05)
    prev = update_target_stats(
        GaussianStats.empty(4, momentum=0.05), unit_rows(rng.normal(size=(16, 4)))
    )

    feats = embed_batch(raw, adapter)
    target = update_target_stats(prev, feats)
    assert target.last_blend == 0.05
    analytic = kl_gradient(source, target, feats, adapter, raw)
    numeric = finite_difference_gradient(
        lambda w: kl_after_update(w, raw, prev, source), adapter.weight, step=1e-5
    )
    assert relative_error(analytic, numeric) < 1e-4


def test_kl_gradient_zero_when_target_equals_source():
    rng = np.random.default_rng(6)
    adapter = make_adapter(rng.normal(size=(3, 5)))
    raw = rng.normal(size=(6, 5))
    feats = embed_batch(raw, adapter)
    source = fit_gaussian(unit_rows(rng.normal(size=(30, 3))), momentum=0.05)
    target = GaussianStats(
        mean=source.mean.copy(),
        covariance=source.covariance.copy(),
        initialized=True,
        momentum=0.05,
        last_blend=0.05,
    )
    grad = kl_gradient(source, target, feats, adapter, raw)
    assert np.linalg.norm(grad) < 1e-6


def test_kl_gradient_empty_batch_is_zero():
    rng = np.random.default_rng(7)
    adapter = make_adapter(rng.normal(size=(3, 5)))
    source = fit_gaussian(unit_rows(rng.normal(size=(30, 3))), momentum=0.05)
    grad = kl_gradient(source, source, np.empty((0, 3)), adapter, np.empty((0, 5)))
    np.testing.assert_array_equal(grad, np.zeros((3, 5)))


# --- loss bundle --------------------------------------------------------------------


def test_loss_bundle_total_is_exact_combination():
    bundle = LossBundle(clustering_loss=0.75, alignment_loss=0.5, lam=0.4, temperature=0.1)
    assert bundle.total == 0.75 + 0.4 * 0.5


def test_total_gradient_additivity():
    adapter, raw, pool, labels = random_instance(seed=9)
    feats = embed_batch(raw, adapter)
    rng = np.random.default_rng(9)
    source = fit_gaussian(unit_rows(rng.normal(size=(40, 4))), momentum=0.05)
    target = update_target_stats(GaussianStats.empty(4, momentum=0.05), feats)
    g_pc = clustering_loss_gradient(feats, labels, pool, DELTA, adapter, raw)
    g_kl = kl_gradient(source, target, feats, adapter, raw)
    lam = 0.7
    np.testing.assert_allclose(g_pc + lam * g_kl, g_pc + lam * g_kl)
    np.testing.assert_array_equal(g_pc + 0.0 * g_kl, g_pc)
