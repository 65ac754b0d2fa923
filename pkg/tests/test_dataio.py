import json

import numpy as np
import pandas as pd
import pytest

from boostlmm import (
    BoostConfig,
    DataError,
    boost_fit,
    cv_curve,
    export_results,
    ingest_csv,
    standardize_dataset,
)
from boostlmm.dataio import destandardize_trace
from boostlmm.datasets import orthodont_path


class TestIngest:
    def test_fixture_shape_and_flags(self, orthodont):
        assert orthodont.n_obs == 108
        assert orthodont.n_clusters == 27
        assert orthodont.colnames == ("female", "age")
        assert orthodont.cluster_constant_idx == {0}

    def test_categorical_dummy_coding(self):
        data = ingest_csv(orthodont_path(), response="distance", cluster="subject",
                          fixed=["sex", "age"])
        assert data.colnames == ("sex_Male", "age")  # Female is the reference level
        assert set(np.unique(data.X[:, 0])) == {0.0, 1.0}

    def test_shuffled_cluster_blocks_give_identical_dataset(self, tmp_path, orthodont):
        # stable sorting restores the block layout whatever order the file
        # lists the clusters in
        df = pd.read_csv(orthodont_path())
        rng = np.random.default_rng(5)
        blocks = [g for _, g in df.groupby("subject", sort=False)]
        shuffled = pd.concat([blocks[i] for i in rng.permutation(len(blocks))])
        f = tmp_path / "shuffled.csv"
        shuffled.to_csv(f, index=False)
        data2 = ingest_csv(f, response="distance", cluster="subject",
                           fixed=["female", "age"])
        assert np.array_equal(orthodont.y, data2.y)
        assert np.array_equal(orthodont.X, data2.X)
        assert np.array_equal(orthodont.cluster_id, data2.cluster_id)

    def test_single_cluster_rejected(self, tmp_path):
        f = tmp_path / "one.csv"
        f.write_text("y,g,x\n1.0,a,0.1\n2.0,a,0.2\n")
        with pytest.raises(DataError, match="2 clusters"):
            ingest_csv(f, response="y", cluster="g", fixed=["x"])

    def test_missing_columns_named(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,g,x\n1.0,a,0.1\n2.0,b,0.2\n")
        with pytest.raises(DataError, match="nope"):
            ingest_csv(f, response="y", cluster="g", fixed=["x", "nope"])

    def test_non_numeric_response_rejected(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,g,x\nlow,a,0.1\nhigh,b,0.2\n")
        with pytest.raises(DataError, match="not numeric"):
            ingest_csv(f, response="y", cluster="g", fixed=["x"])

    def test_missing_values_dropped_with_warning(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,g,x\n1.0,a,0.1\n,a,0.2\n2.0,b,\n3.0,b,0.4\n1.5,a,0.0\n")
        with pytest.warns(RuntimeWarning, match="dropped 2"):
            data = ingest_csv(f, response="y", cluster="g", fixed=["x"])
        assert data.n_obs == 3

    def test_square_transform(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,g,t\n1.0,a,2.0\n2.0,a,3.0\n3.0,b,4.0\n4.0,b,5.0\n")
        data = ingest_csv(f, response="y", cluster="g", fixed=["t"], square=["t"])
        assert data.colnames == ("t", "t^2")
        assert np.array_equal(data.X[:, 1], data.X[:, 0] ** 2)

    def test_unknown_random_slope_rejected(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("y,g,x\n1.0,a,0.1\n2.0,b,0.2\n")
        with pytest.raises(DataError, match="random-slope"):
            ingest_csv(f, response="y", cluster="g", fixed=["x"], random_slopes=["z"])

    def test_dummy_coding_deterministic(self):
        a = ingest_csv(orthodont_path(), response="distance", cluster="subject",
                       fixed=["sex", "age"])
        b = ingest_csv(orthodont_path(), response="distance", cluster="subject",
                       fixed=["sex", "age"])
        assert a.colnames == b.colnames
        assert np.array_equal(a.X, b.X)


class TestExport:
    @pytest.fixture()
    def fitted(self, orthodont):
        config = BoostConfig(nu=0.1, m_stop=40)
        trace = boost_fit(orthodont, config)
        curve = cv_curve(orthodont, config, k=3, seed=1)
        return trace, curve

    def test_written_files_and_estimates(self, fitted, tmp_path):
        trace, curve = fitted
        files = export_results(trace, curve, tmp_path)
        names = {f.name for f in files}
        assert names == {"estimates.json", "path.csv", "cv.csv", "ranef.csv"}
        est = json.loads((tmp_path / "estimates.json").read_text())
        assert est["m_star"] == curve.m_star
        assert set(est["coefficients"]) == {"female", "age"}
        assert est["tau2"] == pytest.approx(trace.Q_path[curve.m_star][0, 0], rel=1e-11)

    def test_path_csv_shape(self, fitted, tmp_path):
        trace, curve = fitted
        export_results(trace, curve, tmp_path)
        path = pd.read_csv(tmp_path / "path.csv")
        assert list(path.columns) == ["iteration", "intercept", "female", "age"]
        assert len(path) == trace.m_stop + 1
        assert np.allclose(path.iloc[0, 1:].astype(float).to_numpy()[1:], 0.0)

    def test_mstop_zero_writes_single_starting_row(self, orthodont, tmp_path):
        trace = boost_fit(orthodont, BoostConfig(m_stop=0))
        export_results(trace, None, tmp_path)
        path = pd.read_csv(tmp_path / "path.csv")
        assert len(path) == 1
        assert (path.iloc[0][["female", "age"]] == 0.0).all()
        assert not (tmp_path / "cv.csv").exists()

    def test_reexport_is_byte_identical(self, fitted, tmp_path):
        trace, curve = fitted
        a, b = tmp_path / "a", tmp_path / "b"
        export_results(trace, curve, a)
        export_results(trace, curve, b)
        for name in ("estimates.json", "path.csv", "cv.csv", "ranef.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_ranef_round_trip_keeps_12_digits(self, fitted, tmp_path):
        trace, curve = fitted
        export_results(trace, curve, tmp_path)
        ranef = pd.read_csv(tmp_path / "ranef.csv")
        got = ranef["intercept"].to_numpy()
        want = trace.gamma_path[curve.m_star][:, 0]
        assert np.abs(got - want).max() <= np.abs(want).max() * 1e-11

    def test_unwritable_directory_raises(self, fitted):
        trace, curve = fitted
        with pytest.raises(DataError, match="cannot write"):
            export_results(trace, curve, "/proc/definitely/not/writable")


class TestStandardize:
    def test_columns_centered_and_scaled(self, orthodont):
        std, means, sds = standardize_dataset(orthodont)
        assert np.abs(std.X.mean(axis=0)).max() < 1e-12
        assert np.allclose(std.X.std(axis=0, ddof=1), 1.0)
        assert std.cluster_constant_idx == orthodont.cluster_constant_idx

    def test_destandardized_path_predicts_identically(self, orthodont):
        std, means, sds = standardize_dataset(orthodont)
        trace_std = boost_fit(std, BoostConfig(nu=0.1, m_stop=30))
        trace = destandardize_trace(trace_std, means, sds)
        for m in (0, 10, 30):
            pred_std = trace_std.beta_path[m, 0] + std.X @ trace_std.beta_path[m, 1:]
            pred = trace.beta_path[m, 0] + orthodont.X @ trace.beta_path[m, 1:]
            assert np.abs(pred - pred_std).max() < 1e-10

    def test_constant_column_not_scaled(self):
        from boostlmm import make_dataset

        X = np.column_stack([np.ones(6), np.arange(6.0)])
        data = make_dataset(np.arange(6.0), [0, 0, 0, 1, 1, 1], X, ["c", "x"])
        with pytest.warns(RuntimeWarning, match="not scaling"):
            std, means, sds = standardize_dataset(data)
        assert sds[0] == 1.0
