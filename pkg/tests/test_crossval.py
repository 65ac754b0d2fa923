import warnings

import numpy as np
import pytest

from boostlmm import (
    BoostConfig,
    DataError,
    cv_criterion,
    cv_curve,
    cv_select,
    make_dataset,
    partition_clusters,
)
from boostlmm.crossval import _HeldoutWorkspace, _fold_values
from boostlmm.engine import boost_fit
from boostlmm.simulate import SimDesign, gen_dataset


def _simple(y, ids, X, names, **kw):
    return make_dataset(np.asarray(y, float), ids, np.asarray(X, float), names, **kw)


class TestPartition:
    def test_even_split(self):
        plan = partition_clusters(10, 5, seed=0)
        sizes = np.bincount(plan.assignment, minlength=5)
        assert list(sizes) == [2, 2, 2, 2, 2]

    def test_uneven_split_balanced_within_one(self):
        plan = partition_clusters(7, 3, seed=1)
        sizes = sorted(np.bincount(plan.assignment, minlength=3), reverse=True)
        assert sizes == [3, 2, 2]

    def test_deterministic_given_seed(self):
        a = partition_clusters(20, 4, seed=42).assignment
        b = partition_clusters(20, 4, seed=42).assignment
        assert np.array_equal(a, b)
        c = partition_clusters(20, 4, seed=43).assignment
        assert not np.array_equal(a, c)

    def test_k_bounds(self):
        with pytest.raises(DataError):
            partition_clusters(5, 6, seed=0)
        with pytest.raises(DataError):
            partition_clusters(5, 1, seed=0)


class TestCvCriterion:
    def test_zero_Qstar_reduces_to_mean_squared_error(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=6)
        X = rng.normal(size=(6, 2))
        held = _simple(y, [0, 0, 0, 1, 1, 1], X, ["a", "b"])
        beta_hat = np.array([0.2, 1.0, -0.5])
        r = y[np.argsort(np.repeat([0, 1], 3))]  # rows already sorted
        resid = held.y - beta_hat[0] - held.X @ beta_hat[1:]
        assert cv_criterion(held, beta_hat, [[0.0]], 1.0) == \
            pytest.approx(float(resid @ resid) / 6.0, rel=1e-12)

    def test_hand_two_by_two_inverse_oracle(self):
        y = np.array([1.0, 2.0, -1.0, 0.5])
        held = _simple(y, [0, 0, 1, 1], np.zeros((4, 1)), ["x"])
        beta_hat = np.array([0.25, 0.0])
        Q, sigma2 = np.array([[0.9]]), 0.5
        qs = Q[0, 0] / sigma2
        B = np.array([[1 + qs, qs], [qs, 1 + qs]])
        det = B[0, 0] ** 2 - B[0, 1] ** 2
        Binv = np.array([[B[1, 1], -B[0, 1]], [-B[1, 0], B[0, 0]]]) / det
        total = 0.0
        for sl in (slice(0, 2), slice(2, 4)):
            r = y[sl] - 0.25
            total += r @ Binv @ r
        assert cv_criterion(held, beta_hat, Q, sigma2) == pytest.approx(total / 4.0, rel=1e-12)

    def test_perfect_fixed_prediction_scores_zero(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(6, 1))
        y = 0.7 + 2.0 * X[:, 0]
        held = _simple(y, [0, 0, 0, 1, 1, 1], X, ["x"])
        assert cv_criterion(held, np.array([0.7, 2.0]), [[0.4]], 0.3) == pytest.approx(0.0, abs=1e-20)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            y = rng.normal(size=8)
            held = _simple(y, np.repeat([0, 1], 4), rng.normal(size=(8, 2)), ["a", "b"])
            val = cv_criterion(held, rng.normal(size=3), [[abs(rng.normal())]],
                               abs(rng.normal()) + 0.1)
            assert val >= 0.0

    def test_batched_path_matches_public_function(self):
        # mixed cluster sizes exercise the size-grouped batching
        rng = np.random.default_rng(3)
        ids = np.repeat([0, 1, 2], [2, 4, 3])
        y = rng.normal(size=9)
        X = rng.normal(size=(9, 2))
        held = _simple(y, ids, X, ["a", "b"])
        ws = _HeldoutWorkspace(held)
        beta_hat = np.array([0.1, -0.4, 0.8])
        Q, sigma2 = np.array([[0.6]]), 0.7
        assert ws.value(beta_hat, Q / sigma2) == \
            pytest.approx(cv_criterion(held, beta_hat, Q, sigma2), rel=1e-12)


class TestCvSelection:
    def test_pure_noise_selects_nearly_empty_models(self):
        wins = 0
        for seed in range(10):
            rng = np.random.Generator(np.random.Philox(1000 + seed))
            n, n_i, p = 20, 5, 5
            N = n * n_i
            X = rng.standard_normal((N, p))
            y = rng.standard_normal(N)
            data = _simple(y, np.repeat(np.arange(n), n_i), X,
                           [f"c{j}" for j in range(p)])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                curve, state = cv_select(data, BoostConfig(nu=0.1, m_stop=150),
                                         k=5, seed=seed)
            assert curve.m_star < 100
            wins += int(np.count_nonzero(state.beta) <= 1)
        assert wins >= 8

    def test_leave_one_cluster_out_boundary(self):
        rng = np.random.default_rng(4)
        n, n_i = 5, 4
        X = rng.normal(size=(n * n_i, 2))
        y = 1.0 + X[:, 0] + rng.normal(size=n * n_i)
        data = _simple(y, np.repeat(np.arange(n), n_i), X, ["a", "b"])
        curve, state = cv_select(data, BoostConfig(nu=0.1, m_stop=30), k=n, seed=0)
        assert curve.values.shape == (30,)
        assert 1 <= curve.m_star <= 30

    def test_curve_invariant_to_cluster_relabeling(self):
        # order-preserving relabeling keeps the same fold assignment
        data, _ = gen_dataset(SimDesign(p=5, tau=0.4, n_clusters=12, obs_per_cluster=4), 0)
        labels = np.array([f"cl_{c:04d}" for c in data.cluster_id])
        relabeled = make_dataset(data.y, labels, data.X, data.colnames)
        cfg = BoostConfig(nu=0.1, m_stop=40)
        a = cv_curve(data, cfg, k=3, seed=5)
        b = cv_curve(relabeled, cfg, k=3, seed=5)
        assert np.array_equal(a.values, b.values)
        assert a.m_star == b.m_star

    def test_fold_complement_missing_level_warns_and_recovers(self):
        # the flagged dummy is 1 only in the last cluster: the complement of
        # the fold holding it out has a constant dummy column
        rng = np.random.default_rng(6)
        n, n_i = 4, 6
        dummy = np.repeat([0.0, 0.0, 0.0, 1.0], n_i)
        X = np.column_stack([dummy, rng.normal(size=n * n_i)])
        y = 1.0 + 0.5 * X[:, 1] + np.repeat(rng.normal(size=n), n_i) \
            + 0.3 * rng.normal(size=n * n_i)
        data = _simple(y, np.repeat(np.arange(n), n_i), X, ["d", "x"])
        assert 0 in data.cluster_constant_idx
        with pytest.warns(RuntimeWarning, match="collinear"):
            curve = cv_curve(data, BoostConfig(nu=0.1, m_stop=20), k=4, seed=0)
        assert np.isfinite(curve.values).all()

    def test_m_star_prefers_smaller_iteration_on_ties(self):
        from boostlmm.crossval import CvCurve

        curve = CvCurve(values=np.array([2.0, 1.0, 1.0, 3.0]), m_star=2)
        assert int(np.argmin(curve.values)) + 1 == 2

    def test_selected_state_is_full_data_refit_at_m_star(self):
        data, _ = gen_dataset(SimDesign(p=5, tau=0.4, n_clusters=12, obs_per_cluster=4), 1)
        cfg = BoostConfig(nu=0.1, m_stop=60)
        curve, state = cv_select(data, cfg, k=3, seed=2)
        trace = boost_fit(data, cfg)
        assert np.array_equal(state.beta, trace.beta_path[curve.m_star, 1:])
        assert np.array_equal(state.gamma, trace.gamma_path[curve.m_star])

    def test_parallel_folds_match_sequential(self):
        data, _ = gen_dataset(SimDesign(p=5, tau=0.4, n_clusters=10, obs_per_cluster=4), 2)
        cfg = BoostConfig(nu=0.1, m_stop=25)
        seq = cv_curve(data, cfg, k=3, seed=9, n_jobs=1)
        par = cv_curve(data, cfg, k=3, seed=9, n_jobs=2)
        assert np.array_equal(seq.values, par.values)

    def test_fold_values_vectorization_consistency(self):
        data, _ = gen_dataset(SimDesign(p=5, tau=0.4, n_clusters=10, obs_per_cluster=4), 3)
        cfg = BoostConfig(nu=0.1, m_stop=15)
        from boostlmm.model import subset_clusters

        train = subset_clusters(data, np.arange(7))
        held = subset_clusters(data, np.arange(7, 10))
        trace = boost_fit(train, cfg)
        vals = _fold_values(trace, held)
        direct = [cv_criterion(held, trace.beta_path[m], trace.Q_path[m],
                               trace.sigma2_path[m]) for m in range(1, 16)]
        assert vals == pytest.approx(direct, rel=1e-12)
