# backend/tests/test_neural.py
import math

import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st
from pydantic import ValidationError
from scipy.special import expit

from core.errors import FormatVersionMismatch, NonFiniteLoss, ShapeMismatch
from tools.neural import (
    Activation,
    AdamState,
    BoundsSpec,
    LossSpec,
    MlpConfig,
    Normalizer,
    OutputHead,
    TrainConfig,
    adam_step,
    backward,
    carve_validation,
    forward,
    forward_cached,
    init_model,
    load_model,
    loss_bce,
    loss_mse_penalty,
    predict,
    save_model,
    train,
)

seeds = st.integers(min_value=0, max_value=10_000)


def _params(model):
    return model.weights + model.biases


def _finite_difference(model, loss_of, h=1e-5):
    """Central differences of loss_of(model) wrt every weight and bias entry."""
    grads = []
    for p in _params(model):
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + h
            up = loss_of(model)
            p[i] = keep - h
            down = loss_of(model)
            p[i] = keep
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


# ── init / forward ────────────────────────────────────────────

def test_init_is_deterministic():
    cfg = MlpConfig(input_dim=2, hidden_layers=(4,), output_dim=1)
    a, b = init_model(cfg, seed=7), init_model(cfg, seed=7)
    for x, y in zip(_params(a), _params(b)):
        np.testing.assert_array_equal(x, y)
    assert all(not bias.any() for bias in a.biases)


def test_init_variance_matches_fan_scaling():
    model = init_model(MlpConfig(input_dim=512, hidden_layers=(512,), output_dim=1), seed=1)
    w = model.weights[0]
    assert np.abs(w).max() <= math.sqrt(6 / 1024)
    assert w.var() == pytest.approx(2 / 1024, rel=0.2)


def test_layer_count_is_limited():
    with pytest.raises(ValidationError):
        MlpConfig(input_dim=2, hidden_layers=(4, 4, 4, 4), output_dim=1)


def test_zero_weights_give_zero_or_half():
    for head, expected in ((OutputHead.LINEAR, 0.0), (OutputHead.SIGMOID, 0.5)):
        model = init_model(MlpConfig(input_dim=3, hidden_layers=(5,), output_dim=2, output_head=head))
        model.weights = [np.zeros_like(w) for w in model.weights]
        out = forward(model, np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(out, np.full((4, 2), expected))


def test_forward_matches_direct_evaluation():
    model = init_model(MlpConfig(input_dim=3, hidden_layers=(6, 5), output_dim=2, activation=Activation.TANH), seed=3)
    rng = np.random.default_rng(4)
    for b in model.biases:
        b[:] = rng.normal(size=b.shape)
    x = rng.normal(size=(7, 3))
    (w1, w2, w3), (b1, b2, b3) = model.weights, model.biases
    expected = np.tanh(np.tanh(x @ w1 + b1) @ w2 + b2) @ w3 + b3
    np.testing.assert_allclose(forward(model, x), expected, atol=1e-12)


def test_forward_rejects_wrong_width():
    model = init_model(MlpConfig(input_dim=3, hidden_layers=(4,), output_dim=1))
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((2, 4)))


@given(seeds)
@hyp_settings(max_examples=25, deadline=None)
def test_sigmoid_head_stays_inside_unit_interval(seed):
    model = init_model(MlpConfig(input_dim=4, hidden_layers=(8,), output_dim=3, output_head=OutputHead.SIGMOID), seed)
    out = forward(model, np.random.default_rng(seed).normal(size=(16, 4)))
    assert np.all((out > 0) & (out < 1))


# ── losses ────────────────────────────────────────────────────

def test_mse_is_zero_at_the_target():
    y = np.array([[0.5, 1.0]])
    bounds = BoundsSpec(np.array([0.0, 0.9]), np.array([1.0, 1.1]))
    loss, grad = loss_mse_penalty(y, y, bounds, 10.0)
    assert loss == 0.0
    assert not grad.any()


def test_penalty_arithmetic():
    bounds = BoundsSpec(np.array([np.nan]), np.array([1.1]))
    loss, grad = loss_mse_penalty(np.array([[1.2]]), np.array([[1.0]]), bounds, 10.0)
    assert loss == pytest.approx(0.04 + 10 * 0.1)
    assert grad[0, 0] == pytest.approx(2 * 0.2 + 10.0)


def test_penalty_off_is_plain_mse():
    pred, target = np.array([[3.0, -1.0]]), np.array([[1.0, 1.0]])
    bounds = BoundsSpec(np.zeros(2), np.ones(2))
    assert loss_mse_penalty(pred, target, bounds, 0.0)[0] == pytest.approx(4.0)


@given(seeds)
@hyp_settings(max_examples=20, deadline=None)
def test_penalty_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    bounds = BoundsSpec(np.full(4, -0.5), np.full(4, 0.5))
    # keep entries off the kinks
    pred = np.where(np.abs(np.abs(pred) - 0.5) < 1e-3, pred + 0.01, pred)
    _, grad = loss_mse_penalty(pred, target, bounds, 3.0)
    h = 1e-6
    for i in np.ndindex(pred.shape):
        up, down = pred.copy(), pred.copy()
        up[i] += h
        down[i] -= h
        numeric = (loss_mse_penalty(up, target, bounds, 3.0)[0] - loss_mse_penalty(down, target, bounds, 3.0)[0]) / (2 * h)
        assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_bce_at_one_half_is_ln2():
    loss, _ = loss_bce(np.full((3, 4), 0.5), np.random.default_rng(0).integers(0, 2, size=(3, 4)))
    assert loss == pytest.approx(math.log(2))


def test_bce_at_the_labels_is_near_zero():
    labels = np.array([[0.0, 1.0, 1.0]])
    loss, _ = loss_bce(labels, labels)
    assert loss <= 1e-11


@given(seeds)
@hyp_settings(max_examples=20, deadline=None)
def test_bce_logit_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3))
    labels = rng.integers(0, 2, size=(4, 3)).astype(float)
    _, grad = loss_bce(expit(logits), labels)
    h = 1e-6
    for i in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[i] += h
        down[i] -= h
        numeric = (loss_bce(expit(up), labels)[0] - loss_bce(expit(down), labels)[0]) / (2 * h)
        assert grad[i] == pytest.approx(numeric, rel=1e-6, abs=1e-10)


def test_losses_reject_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_mse_penalty(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(ShapeMismatch):
        loss_bce(np.full((2, 3), 0.5), np.zeros((2, 2)))


# ── backward ──────────────────────────────────────────────────

@given(seeds)
@hyp_settings(max_examples=10, deadline=None)
def test_regression_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = init_model(MlpConfig(input_dim=4, hidden_layers=(8,), output_dim=3, activation=Activation.TANH), seed)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))

    out, cache = forward_cached(model, x)
    grad_w, grad_b = backward(model, cache, loss_mse_penalty(out, y)[1])
    numeric = _finite_difference(model, lambda m: loss_mse_penalty(forward(m, x), y)[0])
    for analytic, fd in zip(grad_w + grad_b, numeric):
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8)


@given(seeds)
@hyp_settings(max_examples=10, deadline=None)
def test_classification_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = MlpConfig(input_dim=3, hidden_layers=(6, 5), output_dim=4,
                    activation=Activation.TANH, output_head=OutputHead.SIGMOID)
    model = init_model(cfg, seed)
    x = rng.normal(size=(6, 3))
    labels = rng.integers(0, 2, size=(6, 4)).astype(float)

    out, cache = forward_cached(model, x)
    grad_w, grad_b = backward(model, cache, loss_bce(out, labels)[1])
    numeric = _finite_difference(model, lambda m: loss_bce(forward(m, x), labels)[0])
    for analytic, fd in zip(grad_w + grad_b, numeric):
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-8)


def test_zero_upstream_gives_zero_gradients():
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(3,), output_dim=2))
    _, cache = forward_cached(model, np.ones((4, 2)))
    grad_w, grad_b = backward(model, cache, np.zeros((4, 2)))
    assert all(not g.any() for g in grad_w + grad_b)


def test_dead_relu_unit_passes_no_gradient():
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(3,), output_dim=1), seed=2)
    model.biases[0][0] = -100.0
    x = np.random.default_rng(0).normal(size=(5, 2))
    out, cache = forward_cached(model, x)
    grad_w, grad_b = backward(model, cache, np.ones_like(out))
    assert not grad_w[0][:, 0].any()
    assert grad_b[0][0] == 0.0
    assert grad_w[1][0, 0] == 0.0


def test_backward_rejects_wrong_upstream():
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(3,), output_dim=2))
    _, cache = forward_cached(model, np.ones((4, 2)))
    with pytest.raises(ShapeMismatch):
        backward(model, cache, np.zeros((4, 3)))


# ── adam ──────────────────────────────────────────────────────

def _zero_grads(model):
    return [np.zeros_like(w) for w in model.weights], [np.zeros_like(b) for b in model.biases]


def test_adam_with_zero_gradient_changes_nothing():
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(3,), output_dim=1), seed=1)
    before = [p.copy() for p in _params(model)]
    state = AdamState.zeros_like(_params(model))
    adam_step(model, _zero_grads(model), state, 0.01)
    assert state.t == 1
    for p, q in zip(_params(model), before):
        np.testing.assert_array_equal(p, q)


def test_adam_first_step_moves_by_lr_against_the_sign():
    model = init_model(MlpConfig(input_dim=3, hidden_layers=(1,), output_dim=1), seed=1)
    before = model.weights[0].copy()
    grad_w, grad_b = _zero_grads(model)
    grad_w[0] = np.array([[3.0], [-2.0], [0.5]])
    adam_step(model, (grad_w, grad_b), AdamState.zeros_like(_params(model)), 0.01)
    np.testing.assert_allclose(model.weights[0] - before, -0.01 * np.sign(grad_w[0]), rtol=1e-6)


def test_adam_minimises_a_scalar_quadratic():
    model = init_model(MlpConfig(input_dim=1, hidden_layers=(1,), output_dim=1))
    model.weights[0][0, 0] = 1.0
    state = AdamState.zeros_like(_params(model))
    for _ in range(200):
        grad_w, grad_b = _zero_grads(model)
        grad_w[0][0, 0] = 2 * model.weights[0][0, 0]
        adam_step(model, (grad_w, grad_b), state, 0.1)
    assert abs(model.weights[0][0, 0]) < 1e-2


# ── training ──────────────────────────────────────────────────

def test_normalizer_keeps_constant_columns_unscaled():
    norm = Normalizer.fit(np.array([[1.0, 5.0], [3.0, 5.0]]))
    np.testing.assert_array_equal(norm.scale, [1.0, 1.0])
    np.testing.assert_array_equal(norm.transform(np.array([[2.0, 6.0]])), [[0.0, 1.0]])


def test_validation_carve_is_a_seeded_partition():
    x = np.arange(20, dtype=float).reshape(10, 2)
    y = np.arange(10, dtype=float).reshape(10, 1)
    (xf, yf), (xv, yv) = carve_validation(x, y, 0.1, seed=3)
    assert len(xv) == 1 and len(xf) == 9
    assert sorted(np.r_[yf[:, 0], yv[:, 0]].tolist()) == list(range(10))
    again = carve_validation(x, y, 0.1, seed=3)[1][1]
    np.testing.assert_array_equal(again, yv)


def test_single_epoch_history():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 1))
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(4,), output_dim=1))
    _, history = train(model, (x, y), (x, y), LossSpec.regression(), TrainConfig(max_epochs=1))
    assert len(history) == 1
    assert history[0].epoch == 1


def test_zero_epochs_is_rejected():
    with pytest.raises(ValidationError):
        TrainConfig(max_epochs=0)


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(30, 3)), rng.normal(size=(30, 2))
    cfg = TrainConfig(max_epochs=20, batch_size=8, seed=4)
    runs = []
    for _ in range(2):
        model = init_model(MlpConfig(input_dim=3, hidden_layers=(6,), output_dim=2), seed=2)
        runs.append(train(model, (x, y), (x, y), LossSpec.regression(), cfg))
    assert [r.val_loss for r in runs[0][1]] == [r.val_loss for r in runs[1][1]]
    np.testing.assert_array_equal(runs[0][0].weights[0], runs[1][0].weights[0])


def test_best_validation_is_a_running_minimum():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(40, 2)), rng.normal(size=(40, 1))
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(8,), output_dim=1))
    _, history = train(model, (x, y), (x[:5], y[:5]), LossSpec.regression(), TrainConfig(max_epochs=60, batch_size=8))
    best = [r.best_val for r in history]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))


def test_separable_labels_are_learned():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.5, 2.0, size=(64, 2)) * rng.choice([-1.0, 1.0], size=(64, 2))
    labels = (x > 0).astype(float)
    cfg = MlpConfig(input_dim=2, hidden_layers=(16,), output_dim=2, output_head=OutputHead.SIGMOID)
    model = init_model(cfg, seed=0)
    tc = TrainConfig(learning_rate=0.05, max_epochs=500, batch_size=64, early_stop_window=500)
    best, _ = train(model, (x, labels), (x, labels), LossSpec.classification(), tc)
    loss, _ = loss_bce(predict(best, x), labels)
    assert loss < 0.01


def test_linear_map_is_recovered():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(3, 2))
    x, x_test = rng.normal(size=(200, 3)), rng.normal(size=(50, 3))
    y, y_test = x @ A, x_test @ A
    cfg = MlpConfig(input_dim=3, hidden_layers=(32,), output_dim=2, activation=Activation.TANH)
    tc = TrainConfig(learning_rate=0.005, max_epochs=2000, batch_size=200, early_stop_window=200)
    best, _ = train(init_model(cfg, seed=1), (x, y), (x, y), LossSpec.regression(), tc)
    mse = np.mean((predict(best, x_test) - y_test) ** 2, axis=0)
    assert np.all(mse < 1e-3 * y_test.var(axis=0))


def test_non_finite_targets_raise():
    x = np.ones((4, 2))
    y = np.array([[1.0], [np.inf], [2.0], [0.0]])
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(3,), output_dim=1))
    with pytest.raises(NonFiniteLoss) as err:
        train(model, (x, y), (x, y), LossSpec.regression(), TrainConfig(max_epochs=5))
    assert err.value.history == []


def test_empty_training_set_is_rejected():
    model = init_model(MlpConfig(input_dim=2, hidden_layers=(3,), output_dim=1))
    with pytest.raises(ShapeMismatch):
        train(model, (np.zeros((0, 2)), np.zeros((0, 1))), (np.ones((1, 2)), np.ones((1, 1))),
              LossSpec.regression(), TrainConfig(max_epochs=1))


# ── persistence ───────────────────────────────────────────────

def test_saved_model_predicts_identically(tmp_path):
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    model, _ = train(init_model(MlpConfig(input_dim=3, hidden_layers=(5,), output_dim=2)),
                     (x, y), (x, y), LossSpec.regression(), TrainConfig(max_epochs=3))
    path = save_model(model, tmp_path / "m" / "model.json")
    back = load_model(path)
    assert back.config == model.config
    np.testing.assert_array_equal(predict(back, x), predict(model, x))


def test_foreign_model_file_is_rejected(tmp_path):
    path = tmp_path / "model.json"
    path.write_text('{"format": "other/1"}', encoding="utf-8")
    with pytest.raises(FormatVersionMismatch):
        load_model(path)
