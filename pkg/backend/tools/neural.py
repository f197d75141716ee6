# backend/tools/neural.py

"""
Dense MLP on numpy: Glorot-uniform init, forward with cached activations,
manual reverse mode, Adam, MSE with a linear bound penalty, and multi-label BCE.
Everything runs in float64.
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit
from sklearn.preprocessing import StandardScaler

from core.config import settings
from core.errors import FormatVersionMismatch, NonFiniteLoss, ShapeMismatch

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ─────────────────────────────────────────────
# Configs
# ─────────────────────────────────────────────

class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class OutputHead(str, Enum):
    LINEAR  = "linear"
    SIGMOID = "sigmoid"


class MlpConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim:     int = Field(ge=1)
    hidden_layers: Tuple[int, ...]
    output_dim:    int = Field(ge=1)
    activation:    Activation = Activation.RELU
    output_head:   OutputHead = OutputHead.LINEAR

    @field_validator("hidden_layers")
    @classmethod
    def _widths(cls, v):
        if not 1 <= len(v) <= 3:
            raise ValueError(f"1 to 3 hidden layers supported, got {len(v)}")
        if any(w < 1 for w in v):
            raise ValueError(f"hidden widths must be >= 1, got {list(v)}")
        return tuple(v)

    def widths(self) -> List[int]:
        return [self.input_dim, *self.hidden_layers, self.output_dim]


class TrainConfig(BaseModel):
    learning_rate:       float = Field(settings.LEARNING_RATE, gt=0.0)
    max_epochs:          int   = Field(settings.MAX_EPOCHS, ge=1)
    batch_size:          int   = Field(settings.BATCH_SIZE, ge=1)
    penalty_weight:      float = Field(settings.PENALTY_WEIGHT, ge=0.0)
    early_stop_window:   int   = Field(settings.EARLY_STOP_WINDOW, ge=1)
    min_rel_improvement: float = Field(settings.EARLY_STOP_MIN_REL, ge=0.0)
    seed:                int   = 0


@dataclass
class BoundsSpec:
    """Per-output (lower, upper) in target units; NaN means no bound on that side."""
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def unbounded(cls, dim: int) -> "BoundsSpec":
        return cls(np.full(dim, np.nan), np.full(dim, np.nan))


class Normalizer:
    """z-score per dimension; zero-variance dimensions are centred but not scaled."""

    def __init__(self, scaler: StandardScaler):
        self.scaler = scaler

    @property
    def mean(self) -> np.ndarray:
        return self.scaler.mean_

    @property
    def scale(self) -> np.ndarray:
        return self.scaler.scale_

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        return cls(StandardScaler().fit(np.asarray(x, dtype=float)))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.scaler.transform(np.asarray(x, dtype=float))

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return self.scaler.inverse_transform(np.asarray(z, dtype=float))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        scaler = StandardScaler()
        scaler.mean_ = np.array(d["mean"], dtype=float)
        scaler.scale_ = np.array(d["scale"], dtype=float)
        scaler.var_ = scaler.scale_ ** 2
        scaler.n_features_in_ = len(scaler.mean_)
        scaler.n_samples_seen_ = 0
        return cls(scaler)


@dataclass
class LossSpec:
    """Regression (MSE + penalty on de-standardised outputs) or multi-label BCE."""
    kind:           str = "mse"
    bounds:         Optional[BoundsSpec] = None
    penalty_weight: float = 0.0

    @classmethod
    def regression(cls, bounds: Optional[BoundsSpec] = None, penalty_weight: float = 0.0) -> "LossSpec":
        return cls("mse", bounds, penalty_weight)

    @classmethod
    def classification(cls) -> "LossSpec":
        return cls("bce")


@dataclass
class MlpModel:
    config:   MlpConfig
    weights:  List[np.ndarray]
    biases:   List[np.ndarray]
    x_norm:   Optional[Normalizer] = None
    y_norm:   Optional[Normalizer] = None
    metadata: Dict = field(default_factory=dict)

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: List[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class EpochRecord:
    epoch:      int
    train_loss: float
    val_loss:   float
    best_val:   float


# ─────────────────────────────────────────────
# Model
# ─────────────────────────────────────────────

def init_model(cfg: MlpConfig, seed: int = 0) -> MlpModel:
    rng = np.random.default_rng(seed)
    widths = cfg.widths()
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(config=cfg, weights=weights, biases=biases, metadata={"init_seed": seed})


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == Activation.RELU else np.tanh(z)


def _activation_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind == Activation.RELU:
        return (z > 0).astype(float)
    return 1.0 - np.tanh(z) ** 2


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ShapeMismatch(f"expected input of width {model.config.input_dim}, got shape {x.shape}")
    return x


def forward_cached(model: MlpModel, x: np.ndarray):
    """Output plus the cache backward() needs: layer inputs and pre-activations."""
    a = _check_input(model, x)
    inputs, pre = [], []
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        if k < last:
            a = _activate(model.config.activation, z)
        else:
            a = expit(z) if model.config.output_head == OutputHead.SIGMOID else z
    return a, (inputs, pre)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    out, _ = forward_cached(model, x)
    return out


def backward(model: MlpModel, cache, upstream: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    Parameter gradients given the loss gradient wrt the output layer's
    pre-activation (the logits for a sigmoid head, the outputs for a linear one).
    """
    inputs, pre = cache
    delta = np.asarray(upstream, dtype=float)
    if delta.shape != pre[-1].shape:
        raise ShapeMismatch(f"upstream gradient shape {delta.shape} != output shape {pre[-1].shape}")

    n_layers = len(model.weights)
    grad_w: List[np.ndarray] = [None] * n_layers
    grad_b: List[np.ndarray] = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        grad_w[k] = inputs[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k].T) * _activation_grad(model.config.activation, pre[k - 1])
    return grad_w, grad_b


# ─────────────────────────────────────────────
# Losses
# ─────────────────────────────────────────────

def _check_pair(pred: np.ndarray, target: np.ndarray):
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != target shape {target.shape}")


def _penalty(pred: np.ndarray, bounds: BoundsSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise linear violation and its subgradient (0 at the kink)."""
    upper = np.where(np.isnan(bounds.upper), np.inf, bounds.upper)
    lower = np.where(np.isnan(bounds.lower), -np.inf, bounds.lower)
    over = pred > upper
    under = pred < lower
    value = np.where(over, pred - upper, 0.0) + np.where(under, lower - pred, 0.0)
    grad = over.astype(float) - under.astype(float)
    return value, grad


def loss_mse_penalty(pred, target, bounds: Optional[BoundsSpec] = None, penalty_weight: float = 0.0):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    _check_pair(pred, target)
    count = pred.size
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    grad = 2.0 * diff / count
    if bounds is not None and penalty_weight > 0:
        value, sub = _penalty(pred, bounds)
        loss += penalty_weight * float(np.mean(value))
        grad = grad + penalty_weight * sub / count
    return loss, grad


def loss_bce(pred, labels):
    """Mean binary cross-entropy; the gradient is wrt the pre-sigmoid logits."""
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    _check_pair(pred, labels)
    p = np.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    loss = float(np.mean(-(labels * np.log(p) + (1 - labels) * np.log(1 - p))))
    return loss, (pred - labels) / pred.size


def _batch_loss(model: MlpModel, spec: LossSpec, out: np.ndarray, y: np.ndarray):
    """Loss for a batch in the model's working space (standardised targets for regression)."""
    if spec.kind == "bce":
        return loss_bce(out, y)
    loss, grad = loss_mse_penalty(out, y)
    if spec.bounds is not None and spec.penalty_weight > 0:
        y_norm = model.y_norm
        physical = y_norm.inverse(out) if y_norm is not None else out
        value, sub = _penalty(physical, spec.bounds)
        scale = y_norm.scale if y_norm is not None else 1.0
        loss += spec.penalty_weight * float(np.mean(value))
        grad = grad + spec.penalty_weight * sub * scale / out.size
    return loss, grad


# ─────────────────────────────────────────────
# Optimiser / training
# ─────────────────────────────────────────────

def adam_step(model: MlpModel, grads, state: AdamState, lr: float):
    grad_w, grad_b = grads
    params = model.weights + model.biases
    flat = list(grad_w) + list(grad_b)
    state.t += 1
    c1 = 1 - ADAM_BETA1 ** state.t
    c2 = 1 - ADAM_BETA2 ** state.t
    for i, (p, g) in enumerate(zip(params, flat)):
        state.m[i] = ADAM_BETA1 * state.m[i] + (1 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1 - ADAM_BETA2) * g * g
        p -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + ADAM_EPS)
    return model, state


def carve_validation(x: np.ndarray, y: np.ndarray, fraction: float = 0.1, seed: int = 0):
    """Seeded hold-out from the training split used for early stopping."""
    n = len(x)
    n_val = max(1, int(np.floor(n * fraction + 0.5))) if n > 1 else 0
    order = np.random.default_rng(seed).permutation(n)
    val, fit = order[:n_val], order[n_val:]
    if n_val == 0:
        return (x, y), (x, y)
    return (x[fit], y[fit]), (x[val], y[val])


def _evaluate(model: MlpModel, spec: LossSpec, x: np.ndarray, y: np.ndarray) -> float:
    out = forward(model, x)
    return _batch_loss(model, spec, out, y)[0]


def train(
    model: MlpModel,
    train_set: Tuple[np.ndarray, np.ndarray],
    val_set: Tuple[np.ndarray, np.ndarray],
    spec: LossSpec,
    cfg: TrainConfig,
) -> Tuple[MlpModel, List[EpochRecord]]:
    """
    Mini-batch Adam with seeded in-epoch shuffling and early stopping on the
    validation loss. Returns the best-validation snapshot. Inputs are raw;
    normalisers are fitted on the training set when the model has none.
    """
    x_raw, y_raw = (np.asarray(a, dtype=float) for a in train_set)
    xv_raw, yv_raw = (np.asarray(a, dtype=float) for a in val_set)
    if len(x_raw) == 0 or len(xv_raw) == 0:
        raise ShapeMismatch("training and validation sets must be non-empty")
    if y_raw.shape[1] != model.config.output_dim:
        raise ShapeMismatch(f"targets have width {y_raw.shape[1]}, model outputs {model.config.output_dim}")
    if not all(np.isfinite(a).all() for a in (x_raw, y_raw, xv_raw, yv_raw)):
        raise NonFiniteLoss("training data contains NaN or infinite values", history=[])

    if model.x_norm is None:
        model.x_norm = Normalizer.fit(x_raw)
    if spec.kind == "mse" and model.y_norm is None:
        model.y_norm = Normalizer.fit(y_raw)

    x = model.x_norm.transform(x_raw)
    xv = model.x_norm.transform(xv_raw)
    y = model.y_norm.transform(y_raw) if spec.kind == "mse" else y_raw
    yv = model.y_norm.transform(yv_raw) if spec.kind == "mse" else yv_raw

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(model.weights + model.biases)
    history: List[EpochRecord] = []
    best = model.copy()
    best_val = np.inf
    best_epoch = 0
    n = len(x)

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            out, cache = forward_cached(model, x[batch])
            loss, grad = _batch_loss(model, spec, out, y[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"non-finite training loss at epoch {epoch}", history=history)
            adam_step(model, backward(model, cache, grad), state, cfg.learning_rate)
            total += loss * len(batch)

        train_loss = total / n
        val_loss = _evaluate(model, spec, xv, yv)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"non-finite validation loss at epoch {epoch}", history=history)

        if val_loss < best_val - cfg.min_rel_improvement * abs(best_val if np.isfinite(best_val) else 0.0):
            best_val = val_loss
            best_epoch = epoch
            best = model.copy()
        history.append(EpochRecord(epoch, float(train_loss), float(val_loss), float(best_val)))
        logger.debug(f"   epoch {epoch}: train {train_loss:.6g} val {val_loss:.6g} best {best_val:.6g}")

        if epoch - best_epoch >= cfg.early_stop_window:
            logger.debug(f"   early stop at epoch {epoch} (best epoch {best_epoch})")
            break

    best.metadata.update({
        "epochs_run":  len(history),
        "best_epoch":  best_epoch,
        "best_val":    float(best_val),
        "train_seed":  cfg.seed,
        "threads":     1,
    })
    return best, history


def predict(model: MlpModel, x_raw: np.ndarray) -> np.ndarray:
    x = np.asarray(x_raw, dtype=float)
    if model.x_norm is not None:
        x = model.x_norm.transform(x)
    out = forward(model, x)
    if model.y_norm is not None and model.config.output_head == OutputHead.LINEAR:
        out = model.y_norm.inverse(out)
    return out


# ─────────────────────────────────────────────
# Persistence
# ─────────────────────────────────────────────

def model_to_dict(model: MlpModel) -> dict:
    return {
        "format": settings.MODEL_FORMAT,
        "config": model.config.model_dump(mode="json"),
        "layers": [
            {"weights": w.tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
        "x_norm": model.x_norm.to_dict() if model.x_norm else None,
        "y_norm": model.y_norm.to_dict() if model.y_norm else None,
        "metadata": model.metadata,
    }


def save_model(model: MlpModel, path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")
    return out


def load_model(path) -> MlpModel:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("format") != settings.MODEL_FORMAT:
        raise FormatVersionMismatch(f"model format '{raw.get('format')}' is not '{settings.MODEL_FORMAT}'")
    cfg = MlpConfig(**raw["config"])
    weights = [np.array(layer["weights"], dtype=float).reshape(a, b)
               for layer, a, b in zip(raw["layers"], cfg.widths()[:-1], cfg.widths()[1:])]
    biases = [np.array(layer["bias"], dtype=float) for layer in raw["layers"]]
    return MlpModel(
        config=cfg,
        weights=weights,
        biases=biases,
        x_norm=Normalizer.from_dict(raw["x_norm"]) if raw.get("x_norm") else None,
        y_norm=Normalizer.from_dict(raw["y_norm"]) if raw.get("y_norm") else None,
        metadata=raw.get("metadata", {}),
    )
