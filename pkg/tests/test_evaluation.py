import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nlox.datagen import InputSignalSpec, build_dataset
from nlox.errors import DivergenceError
from nlox.evaluation import (
    EkfObserver,
    NloxObserver,
    TruthObserver,
    compare_report,
    discretization_probe,
    evaluate_observer,
    refine_signals,
    rmse,
    rsse,
    sample_estimate_init,
    write_probe,
    write_report,
)
from nlox.baselines import EkfConfig
from nlox.neural import init_params
from nlox.observer import ObserverConfig, zero_omega
from nlox.training import TrainConfig, init_model

SPEC = InputSignalSpec("lognormal_per_step", (0.4,), (0.2,), convention="moments")
OBSERVER = ObserverConfig.with_ones([3.0, 6.0], 1, 0.1)


@pytest.fixture(scope="module")
def data(bioreactor):
    return build_dataset(bioreactor, 10, 60, SPEC, seed=5, t_s=0.1)


class FlakyObserver:
    """Truth everywhere except one trajectory, which diverges."""

    model_based = False
    name = "flaky"

    def __init__(self, bad_index, mode):
        self.bad_index = bad_index
        self.mode = mode

    def run(self, dataset, normalizer, x0_hat=None):
        est = normalizer.to_deviation("x", dataset.states).copy()
        hit = [i for i, tid in enumerate(dataset.indices) if tid == self.bad_index]
        if hit and self.mode == "raise":
            raise DivergenceError("blew up")
        for i in hit:
            est[i, 5:] = np.nan
        return est, {}


def random_omega(seed, width=8):
    net = init_params([2, width, 2], seed)
    return lambda z: (net.weights[1] @ np.tanh(net.weights[0] @ z) + 0.5).reshape(2, 1)


class TestMetrics:
    def test_zero_error(self):
        x = np.random.default_rng(0).normal(size=(20, 3))
        np.testing.assert_array_equal(rmse(x, x), 0.0)

    def test_constant_offset(self):
        x = np.zeros((50, 2))
        np.testing.assert_allclose(rmse(x, x + [0.3, -0.2]), [0.3, 0.2], rtol=1e-15)

    def test_hand_case(self):
        truth = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        est = np.array([[1.0, 1.0], [0.0, 1.0], [3.0, -2.0]])
        np.testing.assert_allclose(rmse(truth, est), [np.sqrt(4 / 3), np.sqrt(6 / 3)], rtol=1e-15)

    def test_pooled_over_leading_axes(self, rng):
        a, b = rng.normal(size=(2, 4, 30, 2))
        np.testing.assert_allclose(rmse(a, b), rmse(a.reshape(-1, 2), b.reshape(-1, 2)), rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.zeros((3, 2)), np.zeros((3, 1)))

    def test_rsse_pythagorean(self):
        assert rsse([3.0, 4.0]) == pytest.approx(5.0, rel=1e-15)

    def test_rsse_rows(self):
        np.testing.assert_allclose(rsse(np.array([[3.0, 4.0], [5.0, 12.0]])), [5.0, 13.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-10, 10)), arrays(np.float64, (12, 3), elements=st.floats(-10, 10)))
def test_rsse_of_rmse_is_root_mean_squared_norm(a, b):
    expected = np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1)))
    assert rsse(rmse(a, b)) == pytest.approx(expected, rel=1e-12, abs=1e-300)


class TestEvaluate:
    def test_truth_observer_scores_zero(self, data):
        _, test_set, nm = data
        report = evaluate_observer(TruthObserver(), test_set, nm, state_names=("x1", "x2"))
        np.testing.assert_array_equal(report.rmse, 0.0)
        assert report.rsse == 0.0 and report.diverged == []

    def test_model_based_needs_initial_estimates(self, bioreactor, data):
        _, test_set, nm = data
        with pytest.raises(ValueError):
            evaluate_observer(EkfObserver(bioreactor, EkfConfig(1.0, 1.0, 1.0)), test_set, nm)

    @pytest.mark.parametrize("mode", ["raise", "nan"])
    def test_diverged_trajectory_excluded_and_counted(self, data, mode):
        _, test_set, nm = data
        bad = test_set.indices[1]
        report = evaluate_observer(FlakyObserver(bad, mode), test_set, nm)
        assert report.diverged == [1] and report.diverged_count == 1
        np.testing.assert_array_equal(report.rmse, 0.0)
        assert np.all(np.isnan(report.rmse_per_trajectory[1]))

    def test_ekf_runs_on_split(self, bioreactor, data):
        _, test_set, nm = data
        x0 = sample_estimate_init(bioreactor, len(test_set), 5)
        report = evaluate_observer(EkfObserver(bioreactor, EkfConfig(1.0, 1.0, 1.0)), test_set, nm, x0)
        assert report.model_based and report.diverged == []
        assert np.all(np.isfinite(report.rmse)) and report.rsse < 0.05
        assert np.all(report.info["min_eigenvalue"] > 0)

    def test_nlox_reports_bound_ratio(self, data):
        _, test_set, nm = data
        config = TrainConfig(epochs=0, omega_hidden=(8,), tdagger_hidden=(8,), seed=0)
        report = evaluate_observer(NloxObserver(init_model(OBSERVER, 2, config)), test_set, nm)
        assert np.all(report.info["max_z_norm"] < report.info["z_bound"])

    def test_initial_estimates_reproducible(self, bioreactor):
        a = sample_estimate_init(bioreactor, 4, 11)
        np.testing.assert_array_equal(a, sample_estimate_init(bioreactor, 4, 11))
        assert a.shape == (4, 2) and np.all(a > 0)


class TestReports:
    def test_write_report_rows(self, data, tmp_path):
        _, test_set, nm = data
        report = evaluate_observer(TruthObserver(), test_set, nm, state_names=("x1", "x2"))
        with open(write_report(report, tmp_path), newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["row", "rmse_x1", "rmse_x2", "rsse"]
        assert [r[0] for r in rows[1:3]] == ["pooled", "trajectory_mean"]
        assert len(rows) == 3 + len(test_set)

    def test_single_observer_table(self, data, tmp_path):
        _, test_set, nm = data
        report = evaluate_observer(TruthObserver(), test_set, nm, state_names=("x1", "x2"))
        rows = compare_report([report], tmp_path)
        assert len(rows) == 1
        assert list(rows[0])[:4] == ["observer", "rmse_x1", "rmse_x2", "rsse"]
        assert (tmp_path / "compare.csv").exists()
        series = np.loadtxt(tmp_path / "timeseries_x1.csv", delimiter=",", skiprows=1)
        assert series.shape == (test_set.n_samples, 3)
        np.testing.assert_array_equal(series[:, 1], series[:, 2])

    def test_rsse_column_recomputes(self, bioreactor, data):
        _, test_set, nm = data
        x0 = sample_estimate_init(bioreactor, len(test_set), 5)
        reports = [
            evaluate_observer(TruthObserver(), test_set, nm),
            evaluate_observer(EkfObserver(bioreactor, EkfConfig(1.0, 1.0, 1.0)), test_set, nm, x0),
        ]
        for row in compare_report(reports):
            assert row["rsse"] == pytest.approx(np.hypot(row["rmse_x1"], row["rmse_x2"]), rel=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            compare_report([])


class TestProbe:
    def test_refined_signals_hit_coarse_samples(self, rng):
        y = rng.normal(size=(7, 1))
        u = rng.normal(size=(7, 1))
        fine_y, fine_u = refine_signals(y, u, 4)
        np.testing.assert_array_equal(fine_y[::4], y)
        np.testing.assert_array_equal(fine_u[::4], u)
        np.testing.assert_array_equal(fine_u[1:4], np.repeat(u[:1], 3, axis=0))

    def test_zero_stub_reports_zero(self):
        result = discretization_probe(OBSERVER, zero_omega(OBSERVER), np.zeros((30, 1)), np.ones((30, 1)))
        np.testing.assert_array_equal(result.errors, 0.0)
        assert np.isnan(result.slope)

    def test_first_order(self, rng):
        y = np.sin(0.2 * np.arange(60))[:, None]
        u = rng.uniform(0.2, 0.6, size=(60, 1))
        result = discretization_probe(OBSERVER, random_omega(3), y, u)
        assert 0.8 <= result.slope <= 1.2
        assert np.all((result.halving_ratios >= 0.4) & (result.halving_ratios <= 0.6))

    def test_step_must_divide(self):
        with pytest.raises(ValueError):
            discretization_probe(OBSERVER, zero_omega(OBSERVER), np.zeros((5, 1)), np.zeros((5, 1)), (0.1, 0.03))

    def test_steps_must_decrease(self):
        with pytest.raises(ValueError):
            discretization_probe(OBSERVER, zero_omega(OBSERVER), np.zeros((5, 1)), np.zeros((5, 1)), (0.05, 0.1))

    def test_write_probe(self, tmp_path, rng):
        y = np.cos(0.3 * np.arange(20))[:, None]
        result = discretization_probe(OBSERVER, random_omega(1), y, np.full((20, 1), 0.4))
        with open(write_probe(result, tmp_path), newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["t_s", "max_error", "ratio_to_previous"]
        assert len(rows) == 5 and rows[1][2] == ""
