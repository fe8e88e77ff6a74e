"""Evaluation accuracy, confidence intervals and report round trips."""

import dataclasses

import numpy as np
import pytest

from rrmkit.attacks import AdversaryBudget
from rrmkit.bench import (
    CSV_COLUMNS,
    RunReport,
    confidence_interval_95,
    emit_report,
    evaluate,
    parse_report,
    report_csv_line,
)
from rrmkit.data import Dataset, SyntheticSpec, generate_synthetic
from rrmkit.errors import ConfigurationError
from rrmkit.models import AffineSpec, ArchDescriptor, build_model
from rrmkit.trainers import TrainConfig, train


def _robust_linear_model():
    """Hand-set linear model that classifies by the sign of the first coordinate."""
    desc = ArchDescriptor(
        input_shape=(3,), layers=(AffineSpec(3, 2),), penultimate_dim=2, num_classes=2
    )
    model = build_model(desc, np.random.default_rng(0))
    model.params["layer0.W"].data[:] = [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]
    model.params["layer0.b"].data[:] = 0.0
    model.params["head.W"].data[:] = [[-1.0, 1.0], [0.0, 0.0]]
    model.params["head.b"].data[:] = 0.0
    return model


def _sign_dataset(n, rng, margin=5.0):
    y = rng.integers(0, 2, size=n)
    x = rng.normal(size=(n, 3))
    x[:, 0] = (2 * y - 1) * margin
    return Dataset(inputs=x, labels=y)


class TestEvaluate:
    def test_perfect_model_natural_accuracy_one(self, rng):
        model = _robust_linear_model()
        ds = _sign_dataset(40, rng)
        natural, adv = evaluate(model, ds)
        assert natural == 1.0
        assert adv is None

    def test_zero_epsilon_adv_equals_natural(self, rng):
        model = _robust_linear_model()
        ds = _sign_dataset(30, rng)
        budget = AdversaryBudget(norm="linf", epsilon=0.0, steps=5, restarts=2,
                                 pixel_box=(-100.0, 100.0))
        natural, adv = evaluate(model, ds, budget, np.random.default_rng(1))
        assert adv == natural

    def test_margin_beats_budget(self, rng):
        # Margin 5 on the decisive coordinate; a 3-coordinate linf attack with
        # epsilon 1 can shift the logit gap by at most 2*3 < 2*5.
        model = _robust_linear_model()
        ds = _sign_dataset(30, rng)
        budget = AdversaryBudget(norm="linf", epsilon=1.0, steps=10, restarts=2,
                                 pixel_box=(-100.0, 100.0))
        natural, adv = evaluate(model, ds, budget, np.random.default_rng(1))
        assert natural == 1.0 and adv == 1.0

    def test_adv_accuracy_non_increasing_in_restarts(self):
        spec = SyntheticSpec(n=120)
        ds = generate_synthetic(spec, np.random.default_rng(2))
        model, _ = train(
            TrainConfig(
                method="erm",
                arch=ArchDescriptor(input_shape=(55,), layers=(AffineSpec(55, 8),),
                                    penultimate_dim=8, num_classes=2),
                epochs=3, batch_size=64, learning_rate=0.1, seed=0,
            ),
            ds,
        )
        accs = []
        for restarts in (1, 3):
            budget = AdversaryBudget(norm="linf", epsilon=0.5, steps=10, restarts=restarts,
                                     pixel_box=(-100.0, 100.0))
            _, adv = evaluate(model, ds, budget, np.random.default_rng(7))
            accs.append(adv)
        assert accs[1] <= accs[0]

    def test_empty_dataset_rejected(self):
        model = _robust_linear_model()
        with pytest.raises(ConfigurationError):
            evaluate(model, Dataset(inputs=np.zeros((0, 3)), labels=np.zeros(0, dtype=int)))


class TestConfidenceInterval:
    def test_one_two_three_oracle(self):
        # mean 2, s = 1, t_{0.975,2} = 4.3027 -> half width 4.3027/sqrt(3)
        mean, half = confidence_interval_95([1.0, 2.0, 3.0])
        assert mean == pytest.approx(2.0, abs=1e-12)
        assert half == pytest.approx(2.4841, abs=1e-3)

    def test_equal_samples_zero_half_width(self):
        mean, half = confidence_interval_95([0.7, 0.7, 0.7, 0.7])
        assert mean == pytest.approx(0.7)
        assert half == 0.0

    def test_requires_two_samples(self):
        with pytest.raises(ConfigurationError):
            confidence_interval_95([1.0])

    def test_matches_scipy_formula(self, rng):
        from scipy import stats

        samples = rng.normal(size=12)
        mean, half = confidence_interval_95(samples)
        expected = stats.t.ppf(0.975, 11) * samples.std(ddof=1) / np.sqrt(12)
        assert mean == pytest.approx(samples.mean())
        assert half == pytest.approx(expected)


class TestReports:
    def _report(self):
        return RunReport(
            method="sat",
            epochs=3,
            epoch_times=[0.5, 0.6, 0.55],
            epoch_time_mean=0.55,
            epoch_time_ci95=0.01,
            total_time=1.65,
            teacher_time=2.0,
            fwd_train=30,
            bwd_train=30,
            fwd_attack=210,
            bwd_attack=210,
            param_updates=30,
            natural_acc=0.9,
            adv_acc=0.7,
            seed=4,
            config_echo={"method": "sat"},
        )

    def test_csv_header_and_row(self, tmp_path):
        path = tmp_path / "r.csv"
        emit_report(self._report(), path, "csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0].split(",") == CSV_COLUMNS
        row = lines[1].split(",")
        assert row[0] == "sat"
        assert row[CSV_COLUMNS.index("fwd_attack")] == "210"
        assert float(row[CSV_COLUMNS.index("total_time_with_teacher_s")]) == pytest.approx(3.65)

    def test_empty_run_report(self, tmp_path):
        report = RunReport(method="erm", epochs=0)
        path = tmp_path / "empty.csv"
        emit_report(report, path, "csv")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        row = lines[1].split(",")
        assert row[CSV_COLUMNS.index("epochs")] == "0"
        assert row[CSV_COLUMNS.index("natural_acc")] == ""

    def test_structured_round_trip(self, tmp_path):
        report = self._report()
        path = tmp_path / "r.json"
        emit_report(report, path, "structured")
        back = parse_report(path)
        assert dataclasses.asdict(back) == dataclasses.asdict(report)

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            emit_report(self._report(), tmp_path / "r.bin", "parquet")

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "r.json"
        emit_report(self._report(), path, "structured")
        doc = path.read_text().replace('"report_version": 1', '"report_version": 99')
        path.write_text(doc)
        with pytest.raises(ConfigurationError):
            parse_report(path)

    def test_csv_line_matches_file_row(self, tmp_path):
        report = self._report()
        path = tmp_path / "r.csv"
        emit_report(report, path, "csv")
        assert report_csv_line(report) == path.read_text().strip().splitlines()[1]

    def test_totals_properties(self):
        report = self._report()
        assert report.total_forwards == 240
        assert report.total_backwards == 240
        assert report.total_time_with_teacher == pytest.approx(3.65)
        assert RunReport(method="erm", epochs=0).total_time_with_teacher is None
