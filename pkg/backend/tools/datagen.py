# backend/tools/datagen.py

"""
Supervised dataset generation: perturb the base load, solve ACOPF, keep the
solved draws. Every draw k uses its own generator seeded with (seed, k), so
the result does not depend on how draws are spread over worker processes.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

from core.config import settings
from core.errors import DatasetIOError, Exhausted, FormatVersionMismatch, TooSmall
from tools.grid_model import Network, compile_network
from tools.opf import OpfOptions, solve_acopf
from tools.power_flow import SetpointLayout

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
SAMPLES_FILE  = "samples.csv"
PROGRESS_EVERY = 250


# ─────────────────────────────────────────────
# Types
# ─────────────────────────────────────────────

class SamplerConfig(BaseModel):
    perturbation: float         = Field(0.1, ge=0.0, lt=1.0)
    n_target:     int           = Field(1000, ge=1)
    seed:         int           = 1
    max_attempts: Optional[int] = Field(None, ge=1)

    def attempt_cap(self) -> int:
        return self.max_attempts if self.max_attempts is not None else 5 * self.n_target


class DatasetManifest(BaseModel):
    format:           str = settings.DATASET_FORMAT
    case_name:        str
    perturbation:     float
    seed:             int
    n_target:         int
    max_attempts:     int
    attempts:         int
    solved:           int
    failed:           int
    convergence_rate: float
    shortfall:        int
    n_bus:            int
    n_gen:            int
    feature_dim:      int
    target_dim:       int
    label_dim:        int
    target_layout:    Dict
    split:            Optional[str] = None


@dataclass
class Sample:
    features:      np.ndarray
    targets:       np.ndarray
    active_labels: np.ndarray
    true_cost:     float


@dataclass
class Dataset:
    samples:  List[Sample]
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.samples)

    def features(self) -> np.ndarray:
        return np.array([s.features for s in self.samples]).reshape(len(self), self.manifest.feature_dim)

    def targets(self) -> np.ndarray:
        return np.array([s.targets for s in self.samples]).reshape(len(self), self.manifest.target_dim)

    def labels(self) -> np.ndarray:
        return np.array([s.active_labels for s in self.samples], dtype=bool).reshape(len(self), self.manifest.label_dim)

    def costs(self) -> np.ndarray:
        return np.array([s.true_cost for s in self.samples], dtype=float)

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        picked = [self.samples[i] for i in indices]
        return Dataset(picked, self.manifest.model_copy(update={"split": split}))


# ─────────────────────────────────────────────
# Sampling
# ─────────────────────────────────────────────

def apply_loads(net: Network, features: np.ndarray) -> Network:
    n = net.n_bus
    features = np.asarray(features, dtype=float)
    buses = tuple(
        b.model_copy(update={"p_load": float(features[i]), "q_load": float(features[n + i])})
        for i, b in enumerate(net.buses)
    )
    return net.model_copy(update={"buses": buses})


def sample_load(base: Network, perturbation: float, draw: np.random.Generator) -> Network:
    """Independent Uniform((1-d)x, (1+d)x) draw for every bus P and Q load."""
    x = np.r_[base.p_load(), base.q_load()]
    a, b = (1 - perturbation) * x, (1 + perturbation) * x
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return apply_loads(base, draw.uniform(lo, hi))


def _solve_draw(base: Network, perturbation: float, opts: OpfOptions, seed: int, index: int) -> Optional[Sample]:
    draw = np.random.default_rng([seed, index])
    net = sample_load(base, perturbation, draw)
    sol = solve_acopf(net, opts)
    if not sol.converged:
        return None
    layout = SetpointLayout(net)
    return Sample(
        features=np.r_[net.p_load(), net.q_load()],
        targets=layout.to_targets(sol.setpoints()),
        active_labels=sol.active_set.bits.copy(),
        true_cost=float(sol.objective),
    )


def _manifest(base: Network, cfg: SamplerConfig, attempts: int, solved: int) -> DatasetManifest:
    idx = compile_network(base)
    layout = SetpointLayout(base, idx)
    return DatasetManifest(
        case_name=base.name,
        perturbation=cfg.perturbation,
        seed=cfg.seed,
        n_target=cfg.n_target,
        max_attempts=cfg.attempt_cap(),
        attempts=attempts,
        solved=solved,
        failed=attempts - solved,
        convergence_rate=solved / attempts if attempts else 0.0,
        shortfall=max(0, cfg.n_target - solved),
        n_bus=idx.n_bus,
        n_gen=idx.n_gen,
        feature_dim=2 * idx.n_bus,
        target_dim=layout.n_targets,
        label_dim=2 * idx.n_gen + 2 * idx.n_bus,
        target_layout=layout.describe(),
    )


def generate_dataset(
    base: Network,
    cfg: SamplerConfig,
    opf_opts: Optional[OpfOptions] = None,
    workers: int = 1,
) -> Dataset:
    """
    Draw until cfg.n_target samples solve or the attempt cap is hit.
    Raises Exhausted (partial dataset attached) on shortfall.
    """
    opf_opts = opf_opts or OpfOptions()
    cap = cfg.attempt_cap()
    task = partial(_solve_draw, base, cfg.perturbation, opf_opts, cfg.seed)

    samples: List[Sample] = []
    attempts = 0
    logger.info(f"🎲 Generating {cfg.n_target} samples for {base.name} (δ={cfg.perturbation}, seed={cfg.seed}, workers={workers})")

    def consume(results):
        nonlocal attempts
        for sample in results:
            attempts += 1
            if sample is not None:
                samples.append(sample)
            if attempts % PROGRESS_EVERY == 0:
                logger.info(f"   {attempts} draws, {len(samples)} solved")
            if len(samples) >= cfg.n_target:
                return True
        return False

    if workers <= 1:
        for index in range(cap):
            if consume([task(index)]):
                break
    else:
        chunk = max(workers * 4, 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            start = 0
            while start < cap:
                stop = min(cap, start + chunk)
                if consume(pool.map(task, range(start, stop))):
                    break
                start = stop

    ds = Dataset(samples, _manifest(base, cfg, attempts, len(samples)))
    m = ds.manifest
    logger.info(f"✅ {base.name}: {m.solved}/{m.attempts} draws solved (convergence rate {m.convergence_rate:.3f})")
    if m.shortfall:
        raise Exhausted(f"attempt cap {cap} reached with {m.solved}/{cfg.n_target} samples solved", dataset=ds)
    return ds


# ─────────────────────────────────────────────
# Split / persistence
# ─────────────────────────────────────────────

def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(ds)
    n_train = int(np.floor(n * (1 - test_fraction) + 0.5))
    if n_train == 0 or n_train == n:
        raise TooSmall(f"{n} samples cannot be split {1 - test_fraction:.2f}/{test_fraction:.2f} with both sides non-empty")
    order = np.random.default_rng(seed).permutation(n)
    return ds.subset(order[:n_train], "train"), ds.subset(order[n_train:], "test")


def _columns(m: DatasetManifest) -> List[str]:
    return (
        [f"f_{i}" for i in range(m.feature_dim)]
        + [f"t_{i}" for i in range(m.target_dim)]
        + [f"a_{i}" for i in range(m.label_dim)]
        + ["cost"]
    )


def save_dataset(ds: Dataset, path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / MANIFEST_FILE).write_text(ds.manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        samples_path = out / SAMPLES_FILE
        if not ds.samples:
            samples_path.unlink(missing_ok=True)
            return out
        frame = pd.DataFrame(
            np.column_stack([ds.features(), ds.targets(), ds.labels().astype(float), ds.costs()]),
            columns=_columns(ds.manifest),
        )
        label_cols = [c for c in frame.columns if c.startswith("a_")]
        frame[label_cols] = frame[label_cols].astype(int)
        frame.to_csv(samples_path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"cannot write dataset to {out}: {e}")
    return out


def load_dataset(path) -> Dataset:
    src = Path(path)
    try:
        raw = json.loads((src / MANIFEST_FILE).read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetIOError(f"cannot read dataset manifest in {src}: {e}")
    except json.JSONDecodeError as e:
        raise FormatVersionMismatch(f"manifest in {src} is not valid JSON: {e}")

    if raw.get("format") != settings.DATASET_FORMAT:
        raise FormatVersionMismatch(f"dataset format '{raw.get('format')}' is not '{settings.DATASET_FORMAT}'")
    try:
        manifest = DatasetManifest(**raw)
    except ValidationError as e:
        raise FormatVersionMismatch(f"manifest in {src} does not match the dataset format: {e}")

    samples_path = src / SAMPLES_FILE
    if not samples_path.exists():
        return Dataset([], manifest)
    try:
        frame = pd.read_csv(samples_path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetIOError(f"cannot read {samples_path}: {e}")
    except pd.errors.EmptyDataError:
        raise FormatVersionMismatch(f"{samples_path} has no header")

    expected = _columns(manifest)
    if list(frame.columns) != expected:
        raise FormatVersionMismatch(f"{samples_path} header does not match the manifest layout")

    m = manifest
    values = frame.to_numpy(dtype=float)
    f_end = m.feature_dim
    t_end = f_end + m.target_dim
    a_end = t_end + m.label_dim
    samples = [
        Sample(
            features=row[:f_end].copy(),
            targets=row[f_end:t_end].copy(),
            active_labels=row[t_end:a_end].astype(bool),
            true_cost=float(row[a_end]),
        )
        for row in values
    ]
    return Dataset(samples, manifest)
