import numpy as np
import pytest

from thama.data import EmbeddingSet, SynthConfig, generate_synthetic
from thama.errors import ConfigError, ShapeError
from thama.models import ModelSpec, build_model
from thama.training import AdamState, TrainConfig, adam_step, evaluate, train


def test_adam_first_step_is_lr_sized():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState.fresh(p)
    new, state2 = adam_step(p, {"w": np.array([1.0, -3.0])}, state, lr=1e-3)
    np.testing.assert_allclose(new["w"], [1.0 - 1e-3, -2.0 + 1e-3], atol=1e-9)
    assert state2.t == 1 and state.t == 0
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([0.5])}
    new, _ = adam_step(p, {"w": np.zeros(1)}, AdamState.fresh(p), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -4.0])}
    state = AdamState.fresh(p)
    for _ in range(3000):
        p, state = adam_step(p, {"w": 2 * p["w"]}, state, lr=0.01)
    assert np.abs(p["w"]).max() < 1e-2


def test_adam_shape_mismatch():
    p = {"w": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(3)}, AdamState.fresh(p), 0.1)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(monitor="acc")
    with pytest.raises(ConfigError):
        TrainConfig(early_stop_patience=0)


def tiny_pair(rng, n=16, d=8):
    x = rng.standard_normal((n, d)).astype(np.float32)
    y = np.tile([0, 1], n // 2)
    return EmbeddingSet(d, np.arange(n), y, np.zeros(n), x), None


def test_early_stop_exactly_at_patience(rng):
    pair = tiny_pair(rng)
    model = build_model(ModelSpec("fcn", 8))
    result = train(model, pair, pair, TrainConfig(lr=1e-12, max_epochs=50, early_stop_patience=10))
    # epoch 1 improves on +inf, then ten epochs without improvement
    assert len(result.history) == 11
    assert result.checkpoint.meta["best_epoch"] == 1


def test_lr_schedule_non_increasing_and_floored(rng):
    pair = tiny_pair(rng)
    model = build_model(ModelSpec("fcn", 8))
    cfg = TrainConfig(lr=1e-5, max_epochs=40, early_stop_patience=30, lr_patience=2, min_lr=4e-6)
    hist = train(model, pair, pair, cfg).history
    assert all(b <= a for a, b in zip(hist.lr, hist.lr[1:]))
    assert min(hist.lr) >= 4e-6


def test_memorizes_sixteen_records(rng):
    pair = tiny_pair(rng)
    model = build_model(ModelSpec("fcn", 8, dropout=0.0))
    result = train(model, pair, pair, TrainConfig(lr=1e-2, batch_size=16, max_epochs=200, early_stop_patience=50))
    assert min(result.history.train_loss) < 0.01


def test_best_epoch_restored(rng):
    pair = tiny_pair(rng)
    model = build_model(ModelSpec("fcn", 8))
    result = train(model, pair, pair, TrainConfig(lr=1e-2, max_epochs=15, early_stop_patience=5))
    best = result.checkpoint.meta["best_epoch"]
    assert result.checkpoint.meta["best_dev_loss"] == min(result.history.dev_loss)
    assert result.history.dev_loss[best - 1] == min(result.history.dev_loss)


def test_training_is_deterministic():
    syn = generate_synthetic(SynthConfig(d1=16, d2=16, n_train=64, n_dev=32, n_test=32, domains=("E",)))
    runs = []
    for _ in range(2):
        model = build_model(ModelSpec("thama", 16, 16, d_f=4))
        res = train(model, syn["E"]["train"], syn["E"]["dev"], TrainConfig(max_epochs=3, early_stop_patience=2))
        runs.append((res.history, evaluate(model, syn["E"]["test"])))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_evaluate_constant_model_is_chance():
    syn = generate_synthetic(SynthConfig(d1=16, d2=16, n_train=8, n_dev=8, n_test=200, domains=("E",)))
    model = build_model(ModelSpec("concat", 16, 16))
    model.params["out.weight"][:] = 0
    report = evaluate(model, syn["E"]["test"], "E")
    assert report.eer == 50.0
    assert report.setting == "E(TR)-E(TE)"
    assert report.counts["bonafide"] + report.counts["fake"] == 200


def test_view_count_mismatch(rng):
    pair = tiny_pair(rng)
    with pytest.raises(ShapeError):
        train(build_model(ModelSpec("concat", 8, 8)), pair, pair)
