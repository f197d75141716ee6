# backend/tests/test_experiments.py
import json

import numpy as np
import pytest
from pydantic import ValidationError

from core.errors import EmptyInput, NonPositiveTrueCost, ShapeMismatch
from tools.experiments import (
    GridSearchSpace,
    SearchPoint,
    classification_breakdown,
    metric_cost_deviation,
    metric_elementwise_accuracy,
    metric_legality_rate,
    run_constraint_prediction,
    run_end_to_end,
    run_warm_start_benchmark,
    save_report,
    summarize_reports,
    target_bounds,
)
from tools.neural import Activation, TrainConfig, load_model
from tools.opf import LegalityReport
from tools.power_flow import SetpointLayout


@pytest.fixture
def tiny_space():
    return GridSearchSpace(
        hidden_layer_options=[[4]],
        activations=[Activation.RELU],
        penalty_options=[False, True],
        base=TrainConfig(max_epochs=5, batch_size=4),
    )


def _legality(flag):
    return LegalityReport(legal=flag, violations=[], pf_converged=flag)


# ── metrics ───────────────────────────────────────────────────

def test_legality_rate():
    assert metric_legality_rate([_legality(True)] * 3 + [_legality(False)]) == 0.75
    with pytest.raises(EmptyInput):
        metric_legality_rate([])


def test_cost_deviation():
    assert metric_cost_deviation([99.0, 102.0], [100.0, 100.0]) == pytest.approx(0.015)
    assert metric_cost_deviation([50.0], [50.0]) == 0.0


@pytest.mark.parametrize("pred, true, error", [
    ([], [], EmptyInput),
    ([1.0], [0.0], NonPositiveTrueCost),
    ([1.0, 2.0], [1.0], ShapeMismatch),
])
def test_cost_deviation_errors(pred, true, error):
    with pytest.raises(error):
        metric_cost_deviation(pred, true)


def test_elementwise_accuracy_thresholds_probabilities():
    probs = np.array([[0.9, 0.2], [0.4, 0.6]])
    labels = np.array([[1, 0], [1, 1]], dtype=bool)
    assert metric_elementwise_accuracy(probs, labels) == 0.75
    assert metric_elementwise_accuracy(labels, labels) == 1.0
    with pytest.raises(ShapeMismatch):
        metric_elementwise_accuracy(probs, labels[:, :1])
    with pytest.raises(EmptyInput):
        metric_elementwise_accuracy(np.zeros((0, 2)), np.zeros((0, 2)))


def test_breakdown():
    probs = np.array([[0.9, 0.2], [0.4, 0.6]])
    labels = np.array([[1, 0], [1, 0]], dtype=bool)
    b = classification_breakdown(probs, labels)
    assert b["elementwise"] == 0.5
    assert b["exact_match"] == 0.5
    assert b["per_constraint"] == [0.5, 0.5]
    assert b["macro"] == 0.5
    assert b["never_active"] == [1]


# ── search space ──────────────────────────────────────────────

def test_config_ids():
    assert SearchPoint(hidden_layers=[256, 256], activation="tanh", penalty=True).config_id == "h256-256_tanh_pen"
    assert SearchPoint(hidden_layers=[128], activation="relu").config_id == "h128_relu"


def test_grid_points(tiny_space):
    assert [p.config_id for p in tiny_space.points()] == ["h4_relu", "h4_relu_pen"]
    assert [p.config_id for p in tiny_space.points(with_penalty=False)] == ["h4_relu"]


def test_empty_grid_dimension_is_rejected():
    with pytest.raises(ValidationError):
        GridSearchSpace(activations=[])


def test_target_bounds_follow_the_layout(two_bus):
    layout = SetpointLayout(two_bus)
    bounds = target_bounds(two_bus, layout)
    assert len(bounds.lower) == len(bounds.upper) == layout.n_targets
    assert np.all(bounds.lower <= bounds.upper)


# ── drivers ───────────────────────────────────────────────────

def test_end_to_end_run(two_bus, two_bus_dataset, tiny_space, out_dir):
    report = run_end_to_end(two_bus_dataset, two_bus, tiny_space, seeds=[0], test_fraction=0.25,
                            split_seed=1, model_dir=out_dir / "models")
    assert (report.n_train, report.n_test) == (9, 3)
    assert [r.config_id for r in report.rows] == ["h4_relu", "h4_relu_pen"]
    assert report.best_config in {"h4_relu", "h4_relu_pen"}
    for row in report.rows:
        assert 0.0 <= row.legality_rate <= 1.0
        assert row.seeds[0].epochs >= 1
        assert all(0 <= k < 3 for k in row.seeds[0].legal_indices)
        load_model(row.model_path)


def test_end_to_end_rejects_a_foreign_network(case30, two_bus_dataset, tiny_space):
    with pytest.raises(ShapeMismatch):
        run_end_to_end(two_bus_dataset, case30, tiny_space, seeds=[0])


def test_constraint_prediction_run(two_bus_dataset, tiny_space):
    report = run_constraint_prediction(two_bus_dataset, tiny_space, seeds=[0, 1], test_fraction=0.25, split_seed=1)
    assert len(report.rows) == 1
    row = report.rows[0]
    assert not row.penalty
    assert len(row.seeds) == 2
    assert 0.0 <= report.elementwise_accuracy <= 1.0
    assert report.elementwise_accuracy == row.accuracy
    assert set(report.breakdown) == {"elementwise", "exact_match", "macro", "per_constraint", "never_active"}
    assert len(report.breakdown["per_constraint"]) == two_bus_dataset.manifest.label_dim


def test_unbuildable_architecture_is_a_failed_row(two_bus_dataset):
    space = GridSearchSpace(
        hidden_layer_options=[[4], [4, 4, 4, 4]],
        activations=[Activation.RELU],
        base=TrainConfig(max_epochs=5, batch_size=4),
    )
    report = run_constraint_prediction(two_bus_dataset, space, seeds=[0], test_fraction=0.25, split_seed=1)
    ok, deep = report.rows
    assert ok.accuracy is not None
    assert deep.accuracy is None
    assert "hidden layers" in deep.error
    assert report.best_config == "h4_relu"


def test_zero_predictions_match_the_cold_start(two_bus, two_bus_dataset):
    report = run_warm_start_benchmark(two_bus_dataset, two_bus, predictions="zeros", test_fraction=0.25, split_seed=1)
    assert report.failures == 0
    assert len(report.pairs) == 3
    assert all(p.warm_iterations == p.cold_iterations for p in report.pairs)
    assert report.mean_iteration_ratio == 1.0
    assert report.regressions == 0


def test_oracle_predictions_are_benchmarked(two_bus, two_bus_dataset):
    report = run_warm_start_benchmark(two_bus_dataset, two_bus, predictions="oracle",
                                      test_fraction=0.25, split_seed=1, limit=2)
    assert len(report.pairs) + report.failures == 2
    assert report.predictions == "oracle"
    for p in report.pairs:
        assert p.cold_iterations >= 1 and p.warm_iterations >= 1


def test_model_predictions_need_a_model(two_bus, two_bus_dataset):
    with pytest.raises(EmptyInput):
        run_warm_start_benchmark(two_bus_dataset, two_bus, model=None, predictions="model", test_fraction=0.25)


def test_empty_benchmark_is_rejected(two_bus, two_bus_dataset):
    with pytest.raises(EmptyInput):
        run_warm_start_benchmark(two_bus_dataset, two_bus, predictions="zeros", test_fraction=0.25, limit=0)


# ── reports ───────────────────────────────────────────────────

def test_reports_are_saved_and_summarized(two_bus, two_bus_dataset, tiny_space, out_dir):
    e2e = run_end_to_end(two_bus_dataset, two_bus, tiny_space, seeds=[0], test_fraction=0.25, split_seed=1)
    warm = run_warm_start_benchmark(two_bus_dataset, two_bus, predictions="zeros", test_fraction=0.25, split_seed=1)
    case = two_bus_dataset.manifest.case_name

    path = save_report(e2e, out_dir, case, "e2e", 1)
    assert path.name == f"{case}_e2e_seed1.json"
    assert path.with_suffix(".csv").exists()
    assert json.loads(path.read_text(encoding="utf-8"))["best_config"] == e2e.best_config
    save_report(warm, out_dir, case, "warmstart-zeros", 1)

    (out_dir / "notes.json").write_text('{"format": "other"}', encoding="utf-8")
    (out_dir / "broken.json").write_text("{", encoding="utf-8")

    table = summarize_reports(out_dir)
    assert len(table) == 2
    assert set(table["task"]) == {"e2e", "warmstart"}
    assert table.loc[table["task"] == "warmstart", "mean_iteration_ratio"].iloc[0] == 1.0


def test_summary_of_an_empty_directory(out_dir):
    assert summarize_reports(out_dir).empty


# ── case30 warm starts (slow) ─────────────────────────────────

def _completed(report):
    return len(report.pairs) + report.failures


@pytest.mark.slow
def test_case30_oracle_warm_starts_save_iterations(case30, case30_dataset):
    report = run_warm_start_benchmark(case30_dataset, case30, predictions="oracle", test_fraction=0.5, split_seed=2)
    improved = sum(p.warm_iterations <= p.cold_iterations for p in report.pairs)
    assert improved / _completed(report) >= 0.7
    assert report.regressions == 0


@pytest.mark.slow
def test_case30_random_predictions_still_converge(case30, case30_dataset):
    report = run_warm_start_benchmark(case30_dataset, case30, predictions="random", test_fraction=0.5, split_seed=2)
    assert len(report.pairs) / _completed(report) >= 0.95
