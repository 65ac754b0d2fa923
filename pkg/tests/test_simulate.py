import warnings

import numpy as np
import pytest

from boostlmm import BoostConfig, boost_fit, detect_cluster_constant, false_positives
from boostlmm.simulate import (
    SimDesign,
    gen_dataset,
    run_replicate,
    run_study,
)


class TestGenDataset:
    def test_cluster_constant_columns_by_construction(self):
        data, _ = gen_dataset(SimDesign(p=10, tau=0.4), 0)
        flagged = detect_cluster_constant(data)
        assert {0, 1} <= flagged
        assert data.cluster_constant_idx == flagged

    def test_slopes_covariance_from_correlation_constraint(self):
        design = SimDesign(p=10, tau=0.4, slopes=True)
        expected = np.array([
            [0.16, 0.096, 0.096],
            [0.096, 0.16, 0.096],
            [0.096, 0.096, 0.16],
        ])
        assert np.allclose(design.true_Q(), expected, atol=1e-12)
        data, truth = gen_dataset(design, 0)
        assert np.allclose(truth.Q, expected)
        assert data.n_random == 3
        assert data.z_cols == ("1", "x3", "x4")

    def test_response_variance_matches_total_variance_decomposition(self):
        # Var(y) = sum(beta^2) + tau^2 + sigma^2 for the intercept design
        design = SimDesign(p=10, tau=0.4)
        ys = np.concatenate([gen_dataset(design, rep)[0].y for rep in range(20)])
        expected = sum(b**2 for b in (2.0, 4.0, 3.0, 5.0)) + 0.4**2 + 0.4**2
        assert np.var(ys) == pytest.approx(expected, rel=0.05)

    def test_bitwise_reproducible(self):
        a, ta = gen_dataset(SimDesign(p=8, tau=0.8), 3)
        b, tb = gen_dataset(SimDesign(p=8, tau=0.8), 3)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.X, b.X)
        assert np.array_equal(ta.gamma, tb.gamma)
        c, _ = gen_dataset(SimDesign(p=8, tau=0.8), 4)
        assert not np.array_equal(a.y, c.y)

    def test_true_state_reconstructs_response(self):
        data, truth = gen_dataset(SimDesign(p=6, tau=0.4), 1)
        from boostlmm import linear_predictor

        # residual must look like N(0, sigma^2) noise around the truth
        resid = data.y - linear_predictor(truth, data)
        assert abs(float(np.std(resid)) - 0.4) < 0.05


class TestFalsePositives:
    def test_all_zero_estimate(self):
        assert false_positives(np.zeros(10)) == 0.0

    def test_everything_selected(self):
        assert false_positives(np.ones(10)) == 1.0

    def test_counts_only_noninformative(self):
        beta = np.zeros(10)
        beta[:4] = 1.0   # informative ones do not count
        beta[7] = 0.3
        assert false_positives(beta) == pytest.approx(1.0 / 6.0)


class TestRunStudy:
    def test_table_format_and_methods(self):
        design = SimDesign(p=6, tau=0.4, n_clusters=10, obs_per_cluster=4, replicates=2)
        table = run_study(design, methods=("boostlmm_a", "ml_oracle"),
                          nu=0.1, m_stop=30, k=2)
        assert list(table.columns) == ["design", "tau", "p", "method", "mse_beta",
                                       "mse_tau", "mse_Q", "fp_rate", "m_star",
                                       "time_s", "failures"]
        assert set(table["method"]) == {"boostlmm_a", "ml_oracle"}
        assert (table["failures"] == 0).all()
        assert (table["mse_beta"] > 0).all()

    def test_dense_fit_skipped_in_high_dimensions(self):
        design = SimDesign(p=60, tau=0.4, n_clusters=5, obs_per_cluster=10,
                           replicates=1)
        table = run_study(design, methods=("boostlmm_a", "ml_oracle"),
                          nu=0.1, m_stop=10, k=2)
        assert set(table["method"]) == {"boostlmm_a"}

    def test_failures_recorded_not_fatal(self, monkeypatch):
        import boostlmm.simulate as sim

        def boom(*a, **kw):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(sim, "cv_select", boom)
        design = SimDesign(p=6, tau=0.4, n_clusters=8, obs_per_cluster=4, replicates=2)
        table = run_study(design, methods=("boostlmm_a",), nu=0.1, m_stop=10, k=2)
        assert int(table["failures"].iloc[0]) == 2

    def test_parallel_jobs_match_sequential(self):
        design = SimDesign(p=5, tau=0.4, n_clusters=8, obs_per_cluster=4, replicates=2)
        a = run_study(design, methods=("boostlmm_a",), nu=0.1, m_stop=20, k=2, n_jobs=1)
        b = run_study(design, methods=("boostlmm_a",), nu=0.1, m_stop=20, k=2, n_jobs=2)
        assert a["mse_beta"].iloc[0] == pytest.approx(b["mse_beta"].iloc[0], rel=1e-12)


class TestAbsorptionContrast:
    def test_legacy_intercepts_track_constant_covariates(self):
        data, _ = gen_dataset(SimDesign(p=10, tau=0.4), 3)
        x1 = data.X[data.cluster_starts, 0]
        x2 = data.X[data.cluster_starts, 1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            legacy = boost_fit(data, BoostConfig.legacy(nu=0.1, m_stop=150))
        g = legacy.gamma_path[-1][:, 0]
        # the intercepts absorb 2*x1 + 4*x2; the stronger effect dominates
        assert abs(np.corrcoef(x2, g)[0, 1]) > 0.5
        assert abs(np.corrcoef(x1, g)[0, 1]) > 0.3

    def test_corrected_intercepts_are_uncorrelated(self):
        data, _ = gen_dataset(SimDesign(p=10, tau=0.4), 3)
        x1 = data.X[data.cluster_starts, 0]
        trace = boost_fit(data, BoostConfig(nu=0.1, m_stop=300))
        g = trace.gamma_path[-1][:, 0]
        assert abs(np.corrcoef(x1, g)[0, 1]) < 0.05


class TestReplicateMetrics:
    def test_metrics_fields_and_magnitudes(self):
        design = SimDesign(p=6, tau=0.4, n_clusters=15, obs_per_cluster=5)
        m = run_replicate(design, "boostlmm_a", 0, m_stop=150, k=3)
        assert m.mse_beta >= 0.0 and m.mse_tau >= 0.0 and m.mse_Q >= 0.0
        assert 0.0 <= m.false_positive_rate <= 1.0
        assert 1 <= m.m_star <= 150
        assert m.wall_time_seconds > 0.0
