# backend/tools/experiments.py

"""
Experiment drivers for end-to-end setpoint prediction, active-constraint
prediction and the warm-start benchmark, with their metrics and report persistence.
"""

import json
import logging
import time
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator

from core.config import settings
from core.errors import EmptyInput, NonPositiveTrueCost, OpfIqError, ShapeMismatch
from tools.datagen import Dataset, apply_loads, split_dataset
from tools.grid_model import Network, compile_network
from tools.neural import (
    Activation,
    BoundsSpec,
    LossSpec,
    MlpConfig,
    MlpModel,
    OutputHead,
    TrainConfig,
    carve_validation,
    init_model,
    predict,
    save_model,
    train,
)
from tools.opf import (
    ActiveSetVector,
    LegalityReport,
    OpfOptions,
    check_legality,
    solve_acopf,
    warm_start_from_active_set,
)
from tools.power_flow import SetpointLayout, SetpointProfile

logger = logging.getLogger(__name__)

REGRESSION_TOL = 1e-4
VALIDATION_FRACTION = 0.1


# ─────────────────────────────────────────────
# Search space / report types
# ─────────────────────────────────────────────

class SearchPoint(BaseModel):
    hidden_layers: List[int]
    activation:    Activation
    penalty:       bool = False

    @property
    def config_id(self) -> str:
        width = "-".join(str(w) for w in self.hidden_layers)
        return f"h{width}_{self.activation.value}" + ("_pen" if self.penalty else "")


class GridSearchSpace(BaseModel):
    hidden_layer_options: List[List[int]] = Field(default_factory=lambda: [list(h) for h in settings.GRID_HIDDEN_LAYERS])
    activations:          List[Activation] = Field(default_factory=lambda: [Activation(a) for a in settings.GRID_ACTIVATIONS])
    penalty_options:      List[bool] = Field(default_factory=lambda: [False, True])
    base:                 TrainConfig = Field(default_factory=TrainConfig)

    @field_validator("hidden_layer_options", "activations", "penalty_options")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("grid search dimensions must be non-empty")
        return v

    def points(self, with_penalty: bool = True) -> List[SearchPoint]:
        penalties = self.penalty_options if with_penalty else [False]
        return [
            SearchPoint(hidden_layers=h, activation=a, penalty=p)
            for h, a, p in product(self.hidden_layer_options, self.activations, penalties)
        ]


class SeedResult(BaseModel):
    seed:               int
    epochs:             int = 0
    legality_rate:      Optional[float] = None
    avg_cost_deviation: Optional[float] = None
    legal_indices:      List[int] = Field(default_factory=list)
    accuracy:           Optional[float] = None
    error:              Optional[str] = None


class ConfigRow(BaseModel):
    config_id:          str
    hidden_layers:      List[int]
    activation:         str
    penalty:            bool
    seeds:              List[SeedResult] = Field(default_factory=list)
    legality_rate:      Optional[float] = None
    avg_cost_deviation: Optional[float] = None
    accuracy:           Optional[float] = None
    breakdown:          Optional[Dict] = None
    model_path:         Optional[str] = None
    error:              Optional[str] = None


class EndToEndReport(BaseModel):
    format:             str = settings.REPORT_FORMAT
    task:               str = "e2e"
    case_name:          str
    split_seed:         int
    n_train:            int
    n_test:             int
    legality_rate:      float = Field(ge=0.0, le=1.0)
    avg_cost_deviation: Optional[float] = Field(None, ge=0.0)
    best_config:        Optional[str] = None
    rows:               List[ConfigRow]


class ConstraintReport(BaseModel):
    format:               str = settings.REPORT_FORMAT
    task:                 str = "constraints"
    case_name:            str
    split_seed:           int
    n_train:              int
    n_test:               int
    elementwise_accuracy: float = Field(ge=0.0, le=1.0)
    breakdown:            Dict = Field(default_factory=dict)
    best_config:          Optional[str] = None
    rows:                 List[ConfigRow]


class WarmStartPair(BaseModel):
    index:           int
    cold_iterations: int = Field(ge=1)
    warm_iterations: int = Field(ge=1)
    cold_seconds:    float
    warm_seconds:    float
    objective_gap:   float
    regression:      bool


class WarmStartReport(BaseModel):
    format:               str = settings.REPORT_FORMAT
    task:                 str = "warmstart"
    case_name:            str
    split_seed:           int
    predictions:          str
    pairs:                List[WarmStartPair]
    failures:             int
    fraction_improved:    Optional[float] = None
    mean_iteration_ratio: Optional[float] = None
    regressions:          int = 0


# ─────────────────────────────────────────────
# Metrics
# ─────────────────────────────────────────────

def metric_legality_rate(reports: Sequence[LegalityReport]) -> float:
    if not reports:
        raise EmptyInput("no legality reports")
    return sum(1 for r in reports if r.legal) / len(reports)


def metric_cost_deviation(pred_costs: Sequence[float], true_costs: Sequence[float]) -> float:
    pred = np.asarray(pred_costs, dtype=float)
    true = np.asarray(true_costs, dtype=float)
    if pred.shape != true.shape:
        raise ShapeMismatch(f"{pred.size} predicted costs vs {true.size} true costs")
    if pred.size == 0:
        raise EmptyInput("no legal grids to compare costs on")
    if np.any(true <= 0):
        raise NonPositiveTrueCost("true costs must be positive")
    return float(np.mean(np.abs(1 - pred / true)))


def _threshold(pred_bits) -> np.ndarray:
    return np.asarray(pred_bits, dtype=float) >= settings.DECISION_THRESHOLD


def metric_elementwise_accuracy(pred_bits, label_bits) -> float:
    pred = np.asarray(pred_bits)
    labels = np.asarray(label_bits)
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != label shape {labels.shape}")
    if pred.size == 0:
        raise EmptyInput("no labels to score")
    return float(np.mean(_threshold(pred) == labels.astype(bool)))


def classification_breakdown(pred_bits, label_bits) -> Dict:
    """Elementwise, per-sample exact match, per-constraint and macro accuracy, never-active constraints."""
    pred = _threshold(pred_bits)
    labels = np.asarray(label_bits).astype(bool)
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != label shape {labels.shape}")
    hit = pred == labels
    per_constraint = hit.mean(axis=0)
    return {
        "elementwise":    float(hit.mean()),
        "exact_match":    float(hit.all(axis=1).mean()),
        "macro":          float(per_constraint.mean()),
        "per_constraint": per_constraint.tolist(),
        "never_active":   np.flatnonzero(~labels.any(axis=0)).tolist(),
    }


# ─────────────────────────────────────────────
# Drivers
# ─────────────────────────────────────────────

def target_bounds(net: Network, layout: Optional[SetpointLayout] = None) -> BoundsSpec:
    """P limits for the predicted generators, V limits for the predicted buses."""
    layout = layout or SetpointLayout(net)
    gens = [net.generators[k] for k in layout.idx.gens]
    lower = np.r_[[gens[k].p_min for k in layout.p_slots], [net.buses[i].v_min for i in layout.v_buses]]
    upper = np.r_[[gens[k].p_max for k in layout.p_slots], [net.buses[i].v_max for i in layout.v_buses]]
    return BoundsSpec(lower=lower.astype(float), upper=upper.astype(float))


def _fit(point: SearchPoint, head: OutputHead, x, y, spec: LossSpec, base: TrainConfig, seed: int):
    cfg = MlpConfig(
        input_dim=x.shape[1],
        hidden_layers=tuple(point.hidden_layers),
        output_dim=y.shape[1],
        activation=point.activation,
        output_head=head,
    )
    fit_set, val_set = carve_validation(x, y, VALIDATION_FRACTION, seed)
    model = init_model(cfg, seed)
    return train(model, fit_set, val_set, spec, base.model_copy(update={"seed": seed}))


def _mean(values: List[Optional[float]]) -> Optional[float]:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def _model_path(model_dir: Optional[Path], case: str, task: str, config_id: str) -> Optional[Path]:
    if model_dir is None:
        return None
    return Path(model_dir) / f"{case}_{task}_{config_id}.json"


def run_end_to_end(
    ds: Dataset,
    net: Network,
    space: Optional[GridSearchSpace] = None,
    seeds: Sequence[int] = tuple(settings.GRID_SEEDS),
    test_fraction: float = 0.1,
    split_seed: int = 0,
    model_dir: Optional[Path] = None,
) -> EndToEndReport:
    space = space or GridSearchSpace()
    layout = SetpointLayout(net)
    if ds.manifest.target_dim != layout.n_targets or ds.manifest.feature_dim != 2 * net.n_bus:
        raise ShapeMismatch("dataset layout does not match the network")

    train_ds, test_ds = split_dataset(ds, test_fraction, split_seed)
    x, y = train_ds.features(), train_ds.targets()
    x_test = test_ds.features()
    bounds = target_bounds(net, layout)
    n = net.n_bus

    # one Network per test instance, shared by every configuration
    test_nets = [apply_loads(net, f) for f in x_test]

    rows: List[ConfigRow] = []
    for point in space.points(with_penalty=True):
        row = ConfigRow(
            config_id=point.config_id,
            hidden_layers=point.hidden_layers,
            activation=point.activation.value,
            penalty=point.penalty,
        )
        spec = LossSpec.regression(bounds, space.base.penalty_weight if point.penalty else 0.0)
        for s_i, seed in enumerate(seeds):
            result = SeedResult(seed=seed)
            try:
                model, history = _fit(point, OutputHead.LINEAR, x, y, spec, space.base, seed)
            except (OpfIqError, ValidationError) as e:
                logger.warning(f"⚠️  {point.config_id} seed {seed}: training failed: {e}")
                result.error = str(e)
                row.seeds.append(result)
                continue
            result.epochs = len(history)

            predicted = predict(model, x_test)
            reports = []
            for k, (net_k, target) in enumerate(zip(test_nets, predicted)):
                profile = layout.from_targets(target, x_test[k, :n], x_test[k, n:])
                reports.append(check_legality(net_k, profile))
            legal = [k for k, r in enumerate(reports) if r.legal]
            result.legality_rate = metric_legality_rate(reports)
            result.legal_indices = legal
            if legal:
                pred_costs = [reports[k].objective for k in legal]
                true_costs = [test_ds.samples[k].true_cost for k in legal]
                result.avg_cost_deviation = metric_cost_deviation(pred_costs, true_costs)

            if s_i == 0:
                path = _model_path(model_dir, ds.manifest.case_name, "e2e", point.config_id)
                if path is not None:
                    save_model(model, path)
                    row.model_path = str(path)
            row.seeds.append(result)
            logger.info(
                f"   {point.config_id} seed {seed}: legality {result.legality_rate:.3f}"
                + (f", cost deviation {result.avg_cost_deviation:.5f}" if result.avg_cost_deviation is not None else "")
            )

        row.legality_rate = _mean([r.legality_rate for r in row.seeds])
        row.avg_cost_deviation = _mean([r.avg_cost_deviation for r in row.seeds])
        if row.legality_rate is None:
            row.error = "; ".join(r.error for r in row.seeds if r.error)
        rows.append(row)

    scored = [r for r in rows if r.legality_rate is not None]
    best = min(
        scored,
        key=lambda r: (-r.legality_rate, r.avg_cost_deviation if r.avg_cost_deviation is not None else np.inf),
        default=None,
    )
    return EndToEndReport(
        case_name=ds.manifest.case_name,
        split_seed=split_seed,
        n_train=len(train_ds),
        n_test=len(test_ds),
        legality_rate=best.legality_rate if best else 0.0,
        avg_cost_deviation=best.avg_cost_deviation if best else None,
        best_config=best.config_id if best else None,
        rows=rows,
    )


def run_constraint_prediction(
    ds: Dataset,
    space: Optional[GridSearchSpace] = None,
    seeds: Sequence[int] = tuple(settings.GRID_SEEDS),
    test_fraction: float = 0.1,
    split_seed: int = 0,
    model_dir: Optional[Path] = None,
) -> ConstraintReport:
    space = space or GridSearchSpace()
    train_ds, test_ds = split_dataset(ds, test_fraction, split_seed)
    x, y = train_ds.features(), train_ds.labels().astype(float)
    x_test, y_test = test_ds.features(), test_ds.labels()
    spec = LossSpec.classification()

    rows: List[ConfigRow] = []
    for point in space.points(with_penalty=False):
        row = ConfigRow(
            config_id=point.config_id,
            hidden_layers=point.hidden_layers,
            activation=point.activation.value,
            penalty=False,
        )
        first_probs = None
        for s_i, seed in enumerate(seeds):
            result = SeedResult(seed=seed)
            try:
                model, history = _fit(point, OutputHead.SIGMOID, x, y, spec, space.base, seed)
            except (OpfIqError, ValidationError) as e:
                logger.warning(f"⚠️  {point.config_id} seed {seed}: training failed: {e}")
                result.error = str(e)
                row.seeds.append(result)
                continue
            result.epochs = len(history)
            probs = predict(model, x_test)
            result.accuracy = metric_elementwise_accuracy(probs, y_test)
            if s_i == 0:
                first_probs = probs
                path = _model_path(model_dir, ds.manifest.case_name, "constraints", point.config_id)
                if path is not None:
                    save_model(model, path)
                    row.model_path = str(path)
            row.seeds.append(result)
            logger.info(f"   {point.config_id} seed {seed}: accuracy {result.accuracy:.4f}")

        row.accuracy = _mean([r.accuracy for r in row.seeds])
        if first_probs is not None:
            row.breakdown = classification_breakdown(first_probs, y_test)
        if row.accuracy is None:
            row.error = "; ".join(r.error for r in row.seeds if r.error)
        rows.append(row)

    scored = [r for r in rows if r.accuracy is not None]
    best = max(scored, key=lambda r: r.accuracy, default=None)
    return ConstraintReport(
        case_name=ds.manifest.case_name,
        split_seed=split_seed,
        n_train=len(train_ds),
        n_test=len(test_ds),
        elementwise_accuracy=best.accuracy if best else 0.0,
        breakdown=best.breakdown if best and best.breakdown else {},
        best_config=best.config_id if best else None,
        rows=rows,
    )


def _predicted_bits(mode: str, model: Optional[MlpModel], features: np.ndarray, labels: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    if mode == "oracle":
        return labels.astype(bool)
    if mode == "zeros":
        return np.zeros(labels.shape, dtype=bool)
    if mode == "random":
        return rng.random(labels.shape) < 0.5
    if model is None:
        raise EmptyInput("a constraint model is required for model predictions")
    return _threshold(predict(model, features))


def run_warm_start_benchmark(
    ds: Dataset,
    net: Network,
    model: Optional[MlpModel] = None,
    predictions: str = "model",
    opts: Optional[OpfOptions] = None,
    test_fraction: float = 0.1,
    split_seed: int = 0,
    limit: Optional[int] = None,
) -> WarmStartReport:
    """
    Paired cold/warm ACOPF solves over the test split. `predictions` picks the
    active sets used: "model", "oracle" (stored labels), "zeros" or "random".
    """
    opts = opts or OpfOptions()
    _, test_ds = split_dataset(ds, test_fraction, split_seed)
    samples = test_ds.samples[:limit] if limit is not None else test_ds.samples
    if not samples:
        raise EmptyInput("no test instances to benchmark")

    idx = compile_network(net)
    features = np.array([s.features for s in samples])
    labels = np.array([s.active_labels for s in samples], dtype=bool)
    bits = _predicted_bits(predictions, model, features, labels, np.random.default_rng(split_seed))

    pairs: List[WarmStartPair] = []
    failures = 0
    for k, sample in enumerate(samples):
        net_k = apply_loads(net, sample.features)
        t0 = time.perf_counter()
        cold = solve_acopf(net_k, opts)
        t1 = time.perf_counter()
        try:
            hint = warm_start_from_active_set(
                net_k,
                ActiveSetVector(bits[k], idx.n_gen, idx.n_bus),
                SetpointProfile.from_network(net_k),
            )
            t2 = time.perf_counter()
            warm = solve_acopf(net_k, opts, hint)
            t3 = time.perf_counter()
        except OpfIqError as e:
            logger.debug(f"   instance {k}: warm start failed: {e}")
            failures += 1
            continue
        if not (cold.converged and warm.converged) or cold.iterations < 1 or warm.iterations < 1:
            failures += 1
            continue
        gap = abs(warm.objective - cold.objective) / max(1.0, abs(cold.objective))
        pairs.append(WarmStartPair(
            index=k,
            cold_iterations=cold.iterations,
            warm_iterations=warm.iterations,
            cold_seconds=t1 - t0,
            warm_seconds=t3 - t1,
            objective_gap=gap,
            regression=gap > REGRESSION_TOL,
        ))

    report = WarmStartReport(
        case_name=ds.manifest.case_name,
        split_seed=split_seed,
        predictions=predictions,
        pairs=pairs,
        failures=failures,
        regressions=sum(1 for p in pairs if p.regression),
    )
    if pairs:
        report.fraction_improved = float(np.mean([p.warm_iterations <= p.cold_iterations for p in pairs]))
        report.mean_iteration_ratio = float(np.mean([p.warm_iterations / p.cold_iterations for p in pairs]))
        logger.info(
            f"✅ warm start ({predictions}): {len(pairs)} pairs, improved on {report.fraction_improved:.2%}, "
            f"mean iteration ratio {report.mean_iteration_ratio:.3f}, {failures} failures"
        )
    else:
        logger.warning(f"⚠️  warm start ({predictions}): no instance pairs completed ({failures} failures)")
    return report


# ─────────────────────────────────────────────
# Persistence
# ─────────────────────────────────────────────

def _summary_rows(report: BaseModel) -> List[Dict]:
    if isinstance(report, WarmStartReport):
        return [p.model_dump() for p in report.pairs]
    return [
        {
            "config_id":          r.config_id,
            "hidden_layers":      "-".join(str(w) for w in r.hidden_layers),
            "activation":         r.activation,
            "penalty":            r.penalty,
            "legality_rate":      r.legality_rate,
            "avg_cost_deviation": r.avg_cost_deviation,
            "accuracy":           r.accuracy,
            "error":              r.error,
        }
        for r in report.rows
    ]


def save_report(report: BaseModel, out_dir, case: str, task: str, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"{case}_{task}_seed{seed}"
    json_path = stem.with_suffix(".json")
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    pd.DataFrame(_summary_rows(report)).to_csv(
        stem.with_suffix(".csv"), index=False, float_format="%.17g", lineterminator="\n"
    )
    logger.info(f"📄 Report written to {json_path}")
    return json_path


def summarize_reports(out_dir) -> pd.DataFrame:
    """One row per persisted report with its headline numbers."""
    rows = []
    for path in sorted(Path(out_dir).glob("*.json")):
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        if not isinstance(raw, dict) or raw.get("format") != settings.REPORT_FORMAT:
            continue
        rows.append({
            "file":                 path.name,
            "case":                 raw.get("case_name"),
            "task":                 raw.get("task"),
            "split_seed":           raw.get("split_seed"),
            "best_config":          raw.get("best_config"),
            "legality_rate":        raw.get("legality_rate"),
            "avg_cost_deviation":   raw.get("avg_cost_deviation"),
            "elementwise_accuracy": raw.get("elementwise_accuracy"),
            "fraction_improved":    raw.get("fraction_improved"),
            "mean_iteration_ratio": raw.get("mean_iteration_ratio"),
        })
    return pd.DataFrame(rows, columns=[
        "file", "case", "task", "split_seed", "best_config", "legality_rate",
        "avg_cost_deviation", "elementwise_accuracy", "fraction_improved", "mean_iteration_ratio",
    ])
