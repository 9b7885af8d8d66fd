from __future__ import annotations

import numpy as np
import pytest

from lsvo.losses import TrainConfig
from lsvo.models import build_lsvo, build_stvo, load_checkpoint, save_checkpoint
from lsvo.tensor import Tensor
from lsvo.training import (HISTORY_FIELDS, AdamState, FlowData, TrainingError, adam_step, evaluate_epoch,
                           read_history, shuffle_order, train)

SHAPE = (16, 16, 2)


def small(seed=0):
    return build_lsvo(SHAPE, seed=seed, width=1 / 16)


def toy_data(n, seed=0):
    rng = np.random.default_rng(seed)
    return FlowData(rng.uniform(0, 1, (n, *SHAPE)), rng.normal(0, 0.3, (n, 6)))


# ------------------------------------------------------------------ Adam
def test_adam_zero_grad_leaves_params():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    adam_step(p, {"w": np.zeros(3)}, AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"].data, 1.0)


def test_adam_first_step_is_lr():
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    adam_step(p, {"w": np.full(4, 3.7)}, AdamState(), 1e-3)
    np.testing.assert_allclose(p["w"].data, -1e-3, rtol=1e-7)


def test_adam_quadratic_bowl():
    target = np.array([1.5, -2.0, 0.25])
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = AdamState()
    for _ in range(2000):
        adam_step(p, {"w": 2 * (p["w"].data - target)}, state, 0.05)
    assert np.max(np.abs(p["w"].data - target)) < 1e-6


# ------------------------------------------------------------ evaluation
def test_evaluate_perfect_predictor_is_zero():
    g = build_stvo((46, 148, 2), width=1 / 16)
    label = np.array([0.1, 0.0, 0.9, 0.0, 0.02, 0.0])
    for name, p in g.params.items():
        p.data[...] = 0.0
    g.params["st-dense2.b"].data[...] = label
    data = FlowData(np.random.default_rng(0).uniform(0, 1, (5, 46, 148, 2)), np.tile(label, (5, 1)))
    assert evaluate_epoch(g, data, TrainConfig())["em"] == 0.0


def test_evaluate_is_pure_and_batch_accounted():
    g, data = small(), toy_data(12)
    before = g.state()
    a = evaluate_epoch(g, data, TrainConfig(batch_size=4))
    b = evaluate_epoch(g, data, TrainConfig(batch_size=4))
    assert a == b
    assert all(np.array_equal(before[k], g.state()[k]) for k in before)
    one = evaluate_epoch(g, data, TrainConfig(batch_size=12))
    assert one["em"] == pytest.approx(a["em"], rel=1e-12)
    assert one["ae"] == pytest.approx(a["ae"], rel=1e-12)


# -------------------------------------------------------------- training
def test_shuffle_is_a_seeded_permutation():
    a = shuffle_order(50, 3, 1)
    assert sorted(a) == list(range(50))
    np.testing.assert_array_equal(a, shuffle_order(50, 3, 1))
    assert not np.array_equal(a, shuffle_order(50, 3, 2))


def test_identical_runs_identical_history(tmp_path):
    cfg = TrainConfig(lr=1e-3, batch_size=4, epochs=3, seed=5)
    h1 = train(small(), toy_data(10), toy_data(4, 1), cfg, tmp_path / "a").history
    h2 = train(small(), toy_data(10), toy_data(4, 1), cfg, tmp_path / "b").history
    assert h1 == h2
    assert (tmp_path / "a" / "history.csv").read_text() == (tmp_path / "b" / "history.csv").read_text()
    assert (tmp_path / "a" / "history.csv").read_text().splitlines()[0] == ",".join(HISTORY_FIELDS)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = TrainConfig(lr=1e-3, batch_size=4, epochs=4, seed=2)
    full = train(small(), toy_data(10), toy_data(4, 1), cfg, tmp_path / "full")
    part = TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=2)
    train(small(), toy_data(10), toy_data(4, 1), part, tmp_path / "resumed")
    g = small()
    resumed = train(g, toy_data(10), toy_data(4, 1), cfg, tmp_path / "resumed", resume=True)
    assert resumed.history == full.history
    assert read_history(tmp_path / "resumed" / "history.csv") == full.history
    assert resumed.best_epoch == full.best_epoch


def test_checkpoint_reload_preserves_loss(tmp_path):
    g, data = small(), toy_data(8)
    train(g, data, None, TrainConfig(lr=1e-3, batch_size=4, epochs=2), restore_best=False)
    before = evaluate_epoch(g, data, TrainConfig())
    save_checkpoint(tmp_path / "m.ckpt", g)
    after = evaluate_epoch(load_checkpoint(tmp_path / "m.ckpt")[0], data, TrainConfig())
    assert abs(before["em"] - after["em"]) < 1e-6 and abs(before["ae"] - after["ae"]) < 1e-6


def test_lambda_zero_leaves_decoder_untouched():
    g = small()
    init = g.state()
    train(g, toy_data(6), None, TrainConfig(lam=0.0, lr=1e-3, batch_size=3, epochs=2), restore_best=False)
    for name in g.params:
        if g.branch_of(name) == "decoder":
            assert np.array_equal(init[name], g.params[name].data), name
    assert not np.array_equal(init["dense3.w"], g.params["dense3.w"].data)


def test_single_sample_loss_trends_down():
    g = small(3)
    data = toy_data(1, 3)
    hist = train(g, data, None, TrainConfig(lr=1e-3, batch_size=1, epochs=300, patience=300),
                 restore_best=False).history
    em = np.array([h["train_em"] for h in hist])
    windows = em[: len(em) // 50 * 50].reshape(-1, 50).mean(axis=1)
    # parameters are rounded to float32 at every epoch boundary, which sets a ~1e-7 noise floor
    assert np.all(np.diff(windows) <= 1e-6)
    assert em[-1] < 1e-3


def test_early_stopping_and_best_restore(tmp_path):
    g = small()
    res = train(g, toy_data(8), toy_data(8, 9), TrainConfig(lr=3e-2, batch_size=8, epochs=40, patience=2), tmp_path)
    assert res.stopped_early
    assert len(res.history) < 40
    best = load_checkpoint(tmp_path / "best.ckpt")[0].state()
    assert all(np.array_equal(best[k], g.params[k].data.astype(np.float32).astype(np.float64)) for k in best)
    assert res.best_val == pytest.approx(min(h["val_em"] for h in res.history), rel=1e-6)


def test_nan_loss_aborts_with_batch_index():
    data = toy_data(8)
    data.y[5, 0] = np.nan
    with pytest.raises(TrainingError, match="batch 1"):
        train(small(), data, None, TrainConfig(batch_size=4, epochs=1, seed=0))


def test_input_contract():
    with pytest.raises(ValueError, match="empty"):
        train(small(), FlowData(np.zeros((0, *SHAPE)), np.zeros((0, 6))), None, TrainConfig())
    with pytest.raises(ValueError, match="match"):
        train(small(), FlowData(np.zeros((2, 8, 8, 2)), np.zeros((2, 6))), None, TrainConfig())
    with pytest.raises(ValueError):
        FlowData(np.zeros((3, *SHAPE)), np.zeros((2, 6)))
