# backend/core/config.py
import os
import json
from pathlib import Path
from dotenv import load_dotenv
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from core.errors import ConfigError

load_dotenv()


class Settings:

    APP_NAME:    str = os.getenv("APP_NAME", "OpfIQ")
    APP_VERSION: str = os.getenv("APP_VERSION", "1.0.0")
    LOG_LEVEL:   str = os.getenv("LOG_LEVEL", "INFO")

    OUTPUT_DIR: str = os.getenv("OPFIQ_OUTPUT_DIR", "out")
    CASE_DIR:   str = os.getenv("OPFIQ_CASE_DIR", str(Path(__file__).resolve().parents[2] / "data" / "cases"))
    THREADS:    int = int(os.getenv("OPFIQ_THREADS", "1"))

    # ── Power flow ─────────────────────────────────────────────
    PF_TOL:      float = float(os.getenv("OPFIQ_PF_TOL", "1e-8"))
    PF_MAX_ITER: int   = int(os.getenv("OPFIQ_PF_MAX_ITER", "20"))
    # dense LU below this many buses, sparse SuperLU above
    DENSE_BUS_LIMIT: int = 50

    # ── Interior point OPF ─────────────────────────────────────
    OPF_KKT_TOL:           float = float(os.getenv("OPFIQ_OPF_KKT_TOL", "1e-6"))
    OPF_MAX_ITER:          int   = int(os.getenv("OPFIQ_OPF_MAX_ITER", "50"))
    OPF_BARRIER_REDUCTION: float = 0.1
    OPF_STEP_FRACTION:     float = 0.995
    OPF_ACTIVE_EPS:        float = 1e-5
    # barrier level a predicted-active warm start resumes at (cold starts at 1)
    OPF_WARM_BARRIER:      float = 0.1

    # ── Legality ───────────────────────────────────────────────
    LEGALITY_TOL_REL: float = float(os.getenv("OPFIQ_LEGALITY_TOL_REL", "1e-6"))

    # ── Training ───────────────────────────────────────────────
    LEARNING_RATE:        float = 1e-3
    MAX_EPOCHS:           int   = int(os.getenv("OPFIQ_MAX_EPOCHS", "2000"))
    BATCH_SIZE:           int   = 128
    PENALTY_WEIGHT:       float = 100.0
    EARLY_STOP_WINDOW:    int   = 50
    EARLY_STOP_MIN_REL:   float = 1e-5
    DECISION_THRESHOLD:   float = 0.5

    # ── File formats ───────────────────────────────────────────
    DATASET_FORMAT:    str = "opfiq-dataset/1"
    MODEL_FORMAT:      str = "opfiq-model/1"
    REPORT_FORMAT:     str = "opfiq-report/1"
    TARGET_LAYOUT:     str = "pg-nonslack+vg-nonslack/1"
    CONFIG_VERSION:    int = 1

    BUILTIN_CASES = ("case30", "case118")

    # Desk-scale defaults per case (full-scale sample counts are out of reach on a CPU)
    DESK_SCALE_SAMPLES = {
        "case30":  5000,
        "case118": 2000,
    }

    # Hyperparameter grid explored for both tasks
    GRID_HIDDEN_LAYERS = [[128], [256], [512], [128, 128], [256, 256], [512, 512], [512, 512, 512]]
    GRID_ACTIVATIONS   = ["relu", "tanh"]
    GRID_SEEDS         = [0, 1, 2]


settings = Settings()


# ─────────────────────────────────────────────────────────────
# Experiment config (JSON file, flags override)
# ─────────────────────────────────────────────────────────────

class SamplerSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    perturbation: float          = Field(0.1, ge=0.0, lt=1.0)
    n_target:     Optional[int]  = Field(None, ge=1)
    seed:         int            = 1
    max_attempts: Optional[int]  = Field(None, ge=1)


class OpfSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kkt_tol:           float = Field(settings.OPF_KKT_TOL, gt=0.0)
    max_iter:          int   = Field(settings.OPF_MAX_ITER, ge=1)
    barrier_reduction: float = Field(settings.OPF_BARRIER_REDUCTION, gt=0.0, lt=1.0)
    step_fraction:     float = Field(settings.OPF_STEP_FRACTION, gt=0.0, lt=1.0)
    active_eps:        float = Field(settings.OPF_ACTIVE_EPS, gt=0.0)
    warm_barrier:      float = Field(settings.OPF_WARM_BARRIER, gt=0.0, le=1.0)


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate:       float = Field(settings.LEARNING_RATE, gt=0.0)
    max_epochs:          int   = Field(settings.MAX_EPOCHS, ge=1)
    batch_size:          int   = Field(settings.BATCH_SIZE, ge=1)
    penalty_weight:      float = Field(settings.PENALTY_WEIGHT, ge=0.0)
    early_stop_window:   int   = Field(settings.EARLY_STOP_WINDOW, ge=1)
    min_rel_improvement: float = Field(settings.EARLY_STOP_MIN_REL, ge=0.0)


class SearchSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_layers:   List[List[int]] = Field(default_factory=lambda: [list(h) for h in settings.GRID_HIDDEN_LAYERS])
    activations:     List[str]       = Field(default_factory=lambda: list(settings.GRID_ACTIVATIONS))
    penalty_options: List[bool]      = Field(default_factory=lambda: [False, True])


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version:       int            = settings.CONFIG_VERSION
    case_path:     str
    dataset_path:  Optional[str]  = None
    output_dir:    str            = settings.OUTPUT_DIR
    test_fraction: float          = Field(0.1, gt=0.0, lt=1.0)
    seeds:         List[int]      = Field(default_factory=lambda: list(settings.GRID_SEEDS))
    sampler:       SamplerSection = Field(default_factory=SamplerSection)
    opf:           OpfSection     = Field(default_factory=OpfSection)
    train:         TrainSection   = Field(default_factory=TrainSection)
    search:        SearchSection  = Field(default_factory=SearchSection)

    @field_validator("version")
    @classmethod
    def _known_version(cls, v: int) -> int:
        if v != settings.CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v} (expected {settings.CONFIG_VERSION})")
        return v

    @field_validator("case_path")
    @classmethod
    def _case_exists(cls, v: str) -> str:
        if not Path(v).is_file() and v not in settings.BUILTIN_CASES:
            raise ValueError(f"case file not found: {v}")
        return v

    @property
    def case_name(self) -> str:
        return Path(self.case_path).stem

    def resolved_dataset_path(self) -> Path:
        if self.dataset_path:
            return Path(self.dataset_path)
        return Path(self.output_dir) / f"{self.case_name}_dataset"


def load_experiment_config(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """
    Read an ExperimentConfig JSON file. `overrides` are dotted keys
    ("sampler.seed", "output_dir") coming from command-line flags.
    Relative paths inside the file resolve against the file's directory.
    """
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")

    for key in ("case_path", "dataset_path", "output_dir"):
        value = raw.get(key)
        if key == "case_path" and value in settings.BUILTIN_CASES:
            continue
        if isinstance(value, str) and not Path(value).is_absolute():
            raw[key] = str(cfg_path.parent / value)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value

    try:
        return ExperimentConfig(**raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}")
