# backend/tests/test_datagen.py
import json

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from core.errors import DatasetIOError, Exhausted, FormatVersionMismatch, TooSmall
from tools.datagen import (
    MANIFEST_FILE,
    SAMPLES_FILE,
    SamplerConfig,
    apply_loads,
    generate_dataset,
    load_dataset,
    sample_load,
    save_dataset,
    split_dataset,
)
from tools.grid_model import compile_network, parse_matpower_case
from tools.opf import ActiveSetVector, OpfOptions, extract_active_set, solve_acopf, warm_start_from_active_set
from tools.power_flow import SetpointLayout
from tests.conftest import TWO_BUS


# ── sampling ──────────────────────────────────────────────────

@given(
    perturbation=st.floats(min_value=0.0, max_value=0.9),
    seed=st.integers(min_value=0, max_value=2 ** 31),
)
@hyp_settings(max_examples=30, deadline=None)
def test_sampled_loads_stay_in_the_band(case30, perturbation, seed):
    net = sample_load(case30, perturbation, np.random.default_rng(seed))
    for base, x in ((case30.p_load(), net.p_load()), (case30.q_load(), net.q_load())):
        lo = np.minimum((1 - perturbation) * base, (1 + perturbation) * base)
        hi = np.maximum((1 - perturbation) * base, (1 + perturbation) * base)
        assert np.all(x >= lo - 1e-15)
        assert np.all(x <= hi + 1e-15)
        assert np.all(x[base == 0] == 0)


def test_zero_perturbation_reproduces_the_base_load(case30):
    net = sample_load(case30, 0.0, np.random.default_rng(3))
    np.testing.assert_array_equal(net.p_load(), case30.p_load())
    np.testing.assert_array_equal(net.q_load(), case30.q_load())


# ── generation ────────────────────────────────────────────────

def test_dataset_shape_and_manifest(two_bus_dataset):
    ds = two_bus_dataset
    m = ds.manifest
    assert len(ds) == 12
    assert m.solved == 12 and m.shortfall == 0
    assert m.attempts >= 12
    assert m.feature_dim == 4
    assert m.label_dim == 2 * 2 + 2 * 2
    assert ds.features().shape == (12, 4)
    assert ds.targets().shape == (12, m.target_dim)
    assert ds.labels().dtype == bool


def test_costs_follow_the_merit_order(two_bus_dataset):
    load_mw = two_bus_dataset.features()[:, 1] * 100
    assert np.all((load_mw >= 45) & (load_mw <= 55))
    # cheap unit pinned at 40 MW, slack covers the rest at 50 $/MWh
    np.testing.assert_allclose(two_bus_dataset.costs(), 400 + 50 * (load_mw - 40), rtol=1e-4)
    # cheap unit's upper P bound is active in every sample
    assert two_bus_dataset.labels()[:, 1].all()


def test_generation_is_deterministic(two_bus_dataset):
    again = generate_dataset(parse_matpower_case(TWO_BUS), SamplerConfig(perturbation=0.1, n_target=12, seed=5))
    np.testing.assert_array_equal(again.features(), two_bus_dataset.features())
    np.testing.assert_array_equal(again.targets(), two_bus_dataset.targets())


def test_seed_changes_the_draws(two_bus_dataset):
    other = generate_dataset(parse_matpower_case(TWO_BUS), SamplerConfig(perturbation=0.1, n_target=3, seed=6))
    assert not np.array_equal(other.features(), two_bus_dataset.features()[:3])


def test_unservable_load_exhausts_the_attempt_cap(two_bus):
    bus = two_bus.buses[1].model_copy(update={"p_load": 2.0})
    net = two_bus.model_copy(update={"buses": (two_bus.buses[0], bus)})
    cfg = SamplerConfig(perturbation=0.05, n_target=2, seed=1, max_attempts=3)
    with pytest.raises(Exhausted) as err:
        generate_dataset(net, cfg, OpfOptions(max_iter=30))
    ds = err.value.dataset
    assert len(ds) == 0
    assert ds.manifest.attempts == 3
    assert ds.manifest.shortfall == 2
    assert ds.manifest.convergence_rate == 0.0


def test_default_attempt_cap():
    assert SamplerConfig(n_target=40).attempt_cap() == 200


@pytest.mark.slow
def test_worker_count_does_not_change_the_dataset(two_bus_dataset):
    parallel = generate_dataset(
        parse_matpower_case(TWO_BUS), SamplerConfig(perturbation=0.1, n_target=12, seed=5), workers=2,
    )
    np.testing.assert_array_equal(parallel.features(), two_bus_dataset.features())
    np.testing.assert_array_equal(parallel.labels(), two_bus_dataset.labels())


# ── split ─────────────────────────────────────────────────────

def test_split_sizes_and_disjointness(two_bus_dataset):
    train, test = split_dataset(two_bus_dataset, 0.1, seed=0)
    assert (len(train), len(test)) == (11, 1)
    assert train.manifest.split == "train" and test.manifest.split == "test"
    rows = {tuple(r) for r in train.features()} | {tuple(r) for r in test.features()}
    assert rows == {tuple(r) for r in two_bus_dataset.features()}


def test_split_is_seeded(two_bus_dataset):
    a, _ = split_dataset(two_bus_dataset, 0.25, seed=9)
    b, _ = split_dataset(two_bus_dataset, 0.25, seed=9)
    np.testing.assert_array_equal(a.features(), b.features())


def test_single_sample_cannot_be_split(two_bus_dataset):
    with pytest.raises(TooSmall):
        split_dataset(two_bus_dataset.subset([0]), 0.1, seed=0)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2])
def test_split_fraction_must_be_open_interval(two_bus_dataset, fraction):
    with pytest.raises(ValueError):
        split_dataset(two_bus_dataset, fraction, seed=0)


# ── persistence ───────────────────────────────────────────────

def test_save_and_load_preserve_every_value(two_bus_dataset, out_dir):
    save_dataset(two_bus_dataset, out_dir / "ds")
    back = load_dataset(out_dir / "ds")
    assert back.manifest == two_bus_dataset.manifest
    np.testing.assert_array_equal(back.features(), two_bus_dataset.features())
    np.testing.assert_array_equal(back.targets(), two_bus_dataset.targets())
    np.testing.assert_array_equal(back.labels(), two_bus_dataset.labels())
    np.testing.assert_array_equal(back.costs(), two_bus_dataset.costs())


def test_empty_dataset_writes_manifest_only(two_bus_dataset, out_dir):
    empty = two_bus_dataset.subset([])
    path = save_dataset(empty, out_dir / "empty")
    assert (path / MANIFEST_FILE).exists()
    assert not (path / SAMPLES_FILE).exists()
    assert len(load_dataset(path)) == 0


def test_tampered_header_is_rejected(two_bus_dataset, out_dir):
    path = save_dataset(two_bus_dataset, out_dir / "ds")
    csv = path / SAMPLES_FILE
    csv.write_text(csv.read_text(encoding="utf-8").replace("f_0", "load_0", 1), encoding="utf-8")
    with pytest.raises(FormatVersionMismatch):
        load_dataset(path)


def test_unknown_format_is_rejected(two_bus_dataset, out_dir):
    path = save_dataset(two_bus_dataset, out_dir / "ds")
    raw = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
    raw["format"] = "something-else/9"
    (path / MANIFEST_FILE).write_text(json.dumps(raw), encoding="utf-8")
    with pytest.raises(FormatVersionMismatch):
        load_dataset(path)


def test_missing_directory_is_an_io_error(out_dir):
    with pytest.raises(DatasetIOError):
        load_dataset(out_dir / "nowhere")


# ── case30 (slow) ─────────────────────────────────────────────

@pytest.mark.slow
def test_case30_convergence_rate_is_in_band(case30_dataset):
    m = case30_dataset.manifest
    assert m.solved == 40
    assert 0.60 <= m.convergence_rate <= 1.00


@pytest.mark.slow
def test_case30_labels_survive_a_warm_resolve(case30, case30_dataset):
    idx = compile_network(case30)
    layout = SetpointLayout(case30)
    n = idx.n_bus
    consistent = 0
    for sample in case30_dataset.samples:
        net = apply_loads(case30, sample.features)
        profile = layout.from_targets(sample.targets, sample.features[:n], sample.features[n:])
        labels = ActiveSetVector(sample.active_labels, idx.n_gen, idx.n_bus)
        sol = solve_acopf(net, warm=warm_start_from_active_set(net, labels, profile))
        if not sol.converged:
            continue
        mismatch = extract_active_set(net, sol).bits != sample.active_labels
        # flips inside the activity-tolerance band count as jitter
        band = extract_active_set(net, sol, 1e-3).bits & ~extract_active_set(net, sol, 1e-7).bits
        consistent += not (mismatch & ~band).any()
    assert consistent / len(case30_dataset) >= 0.99
