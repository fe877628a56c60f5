import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import J64
from seatlab import attacks, training
from seatlab.data import Dataset
from seatlab.engine import DTYPE, evaluate, leaf, ops
from seatlab.models import Model, ModelSpec
from seatlab.training import (OptimizerState, TrainConfig, TrainingError, batch_step, cyclic_lr,
                              flood, flood_node, linearity_regularizer,
                              linearity_regularizer_node, sgd_step)


@pytest.fixture(scope="module")
def cnn():
    spec = ModelSpec(channels=(4,), hidden=(8,), input_shape=(1, 8, 8))
    return training.Model.init(spec, 0)


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(0)
    return rng.random((12, 1, 8, 8)).astype(DTYPE), rng.integers(0, 10, 12)


def toy_dataset(n=240, seed=0):
    """Two well separated blobs in a 1x8x8 image."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.uniform(0, 0.3, (n, 1, 8, 8))
    x[y == 1, :, :4] += 0.6
    return Dataset(x.astype(DTYPE), y, "train", num_classes=2)


# -- optimizer and schedule ---------------------------------------------------------------

def test_sgd_momentum_by_hand():
    p = {"w": np.array([1.0], DTYPE)}
    g = {"w": np.array([1.0], DTYPE)}
    st_ = OptimizerState.zeros(p)
    p1 = sgd_step(p, g, st_, lr=0.1, momentum=0.9, weight_decay=0.0)
    assert p1["w"][0] == pytest.approx(0.9)
    p2 = sgd_step(p1, g, st_, lr=0.1, momentum=0.9, weight_decay=0.0)
    # v = 0.9 * 1 + 1 = 1.9
    assert p2["w"][0] == pytest.approx(0.9 - 0.19)
    assert st_.step == 2


def test_weight_decay_enters_the_velocity():
    p = {"w": np.array([2.0], DTYPE)}
    out = sgd_step(p, {"w": np.zeros(1, DTYPE)}, OptimizerState.zeros(p), 0.5, 0.0, 0.1)
    assert out["w"][0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgd_rejects_shape_mismatch():
    p = {"w": np.zeros(2, DTYPE)}
    with pytest.raises(ValueError):
        sgd_step(p, {"w": np.zeros(3, DTYPE)}, OptimizerState.zeros(p), 0.1)


def test_cyclic_lr_shape():
    assert cyclic_lr(0, 10, 0.2) == 0.0
    assert cyclic_lr(5, 10, 0.2) == pytest.approx(0.2)
    assert cyclic_lr(9, 10, 0.2) == pytest.approx(0.04)
    assert cyclic_lr(2, 10, 0.2) == pytest.approx(cyclic_lr(8, 10, 0.2))
    with pytest.raises(ValueError):
        cyclic_lr(10, 10, 0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="free_at")
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(inner_loss="kl")
    assert TrainConfig(method="fgsm_at", eps=0.3).step_size == pytest.approx(0.3)
    assert TrainConfig(eps=0.2).step_size == pytest.approx(0.25)


# -- flooding ------------------------------------------------------------------------------

def test_flood_unit_identities():
    assert flood(0.5, 0.3) == pytest.approx(0.5)
    assert flood(0.1, 0.3) == pytest.approx(0.5)
    assert flood(0.3, 0.3) == pytest.approx(0.3)
    assert flood(0.7, 0.0) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        flood(1.0, -0.1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0, 5))
def test_flood_bounds(loss, b):
    v = flood(loss, b)
    assert v >= b and v >= loss - 1e-12
    node = evaluate(flood_node(leaf("l", ()), b), {"l": np.float32(loss)})
    assert node == pytest.approx(v, rel=1e-5, abs=1e-5)


# -- the regularizer ------------------------------------------------------------------------

def test_quadratic_regularizer_closed_form():
    a, d, lam = 2.0, 0.1, 0.5
    x, dl = leaf("x", (1, 1)), leaf("d", (1, 1))

    def quad(z):
        return ops.reduce_sum(z * z * (0.5 * a), axes=(1,))

    j = evaluate(linearity_regularizer_node(quad, x, dl, lam), {"x": [[0.7]], "d": [[d]]})
    assert j == pytest.approx(lam * 0.5 * a * d * d, rel=1e-5)  # 0.005


def test_regularizer_vanishes_for_linear_loss():
    w = np.tile(np.array([[0.3, -1.0, 2.0]], DTYPE), (4, 1))
    x, dl = leaf("x", (4, 3)), leaf("d", (4, 3))

    def lin(z):
        return ops.reduce_sum(z * w, axes=(1,))

    rng = np.random.default_rng(0)
    j = evaluate(linearity_regularizer_node(lin, x, dl, 1.0),
                 {"x": rng.random((4, 3)), "d": 0.1 * rng.standard_normal((4, 3))})
    assert abs(j) < 1e-6


def test_regularizer_matches_float64_oracle(cnn, batch):
    x, y = batch
    d = (0.1 * np.sign(np.random.default_rng(1).standard_normal(x.shape))).astype(DTYPE)
    got = linearity_regularizer(cnn, x, y, d, lam=0.5)
    assert got == pytest.approx(J64(cnn.spec, cnn.params, x, y, d, 0.5), rel=1e-4, abs=1e-7)
    val, grads = linearity_regularizer(cnn, x, y, d, lam=0.5, with_grad=True)
    assert val == pytest.approx(got, rel=1e-6)
    assert set(grads) == set(cnn.params)


# -- reductions between methods ------------------------------------------------------------

def _step(model, x, y, cfg, seed=3, lr=0.1):
    return batch_step(model, x, y, cfg, OptimizerState.zeros(model.params), lr,
                      np.random.default_rng(seed))[0]


def _same(a, b, tol=1e-6):
    return all(np.allclose(a.params[k], b.params[k], atol=tol) for k in a.params)


def test_seat_without_regularizer_is_rs_fgsm(cnn, batch):
    x, y = batch
    base = TrainConfig(eps=0.1, lam=0.0, flood=0.0, inner_loss="ce")
    ref = _step(cnn, x, y, base.with_(method="rs_fgsm"))
    assert _same(_step(cnn, x, y, base.with_(method="seat")), ref)
    # flooding at level 0 is the identity on a non-negative loss
    assert _same(_step(cnn, x, y, base.with_(method="seat_fl")), ref)


def test_trades_without_kl_is_natural(cnn, batch):
    x, y = batch
    base = TrainConfig(eps=0.1, beta=0.0, trades_steps=2)
    assert _same(_step(cnn, x, y, base.with_(method="trades")),
                 _step(cnn, x, y, base.with_(method="natural")))


def test_zero_lr_leaves_params_unchanged(cnn, batch):
    x, y = batch
    for method in training.METHODS:
        cfg = TrainConfig(method=method, eps=0.1, pgd_steps=2, trades_steps=2, weight_decay=0.0)
        out = _step(cnn, x, y, cfg, lr=0.0)
        assert all(out.params[k].tobytes() == cnn.params[k].tobytes() for k in cnn.params)


def test_seat_stats_are_consistent(cnn, batch):
    x, y = batch
    cfg = TrainConfig(method="seat_fl", eps=0.1, lam=0.5, flood=5.0)
    _, stats = batch_step(cnn, x, y, cfg, OptimizerState.zeros(cnn.params), 0.1,
                          np.random.default_rng(0))
    assert stats["risk"] >= 5.0
    assert stats["loss"] == pytest.approx(stats["risk"] + 0.5 * stats["xi"], rel=1e-5)


def test_fgsm_at_perturbation_matches_attack(cnn, batch):
    x, y = batch
    oh = np.eye(10, dtype=DTYPE)[y]
    _, g = attacks.objective_and_grad(cnn, x, oh, "ce")
    np.testing.assert_array_equal(attacks.project(DTYPE(0.1) * np.sign(g), x, 0.1),
                                  attacks.fgsm(cnn, x, y, 0.1))


# -- the loop --------------------------------------------------------------------------------

def test_training_reduces_loss_on_toy_data():
    ds = toy_dataset()
    spec = ModelSpec(arch="mlp", input_shape=(1, 8, 8), hidden=(16,), num_classes=2)
    cfg = TrainConfig(method="natural", epochs=4, batch_size=32, lr=0.1, eps=0.05,
                      val_size=40, val_steps=2, schedule="constant")
    res = training.train(cfg, ds, spec)
    losses = [r.train_loss for r in res.history]
    assert losses[-1] < losses[0]
    assert res.history[-1].sa > 0.9
    assert len(res.batch_log) == 4 * 7


def test_seat_run_logs_flooded_risk():
    ds = toy_dataset()
    spec = ModelSpec(arch="mlp", input_shape=(1, 8, 8), hidden=(16,), num_classes=2)
    cfg = TrainConfig(method="seat_fl", epochs=2, batch_size=50, lr=0.05, eps=0.05,
                      flood=0.3, val_size=40, val_steps=2)
    res = training.train(cfg, ds, spec)
    assert all(b["risk"] >= 0.3 - 1e-6 for b in res.batch_log)


def test_training_is_deterministic():
    ds = toy_dataset()
    spec = ModelSpec(channels=(2,), hidden=(4,), input_shape=(1, 8, 8), num_classes=2)
    cfg = TrainConfig(method="seat", epochs=1, batch_size=50, lr=0.05, eps=0.05,
                      val_size=40, val_steps=2)
    a, b = training.train(cfg, ds, spec), training.train(cfg, ds, spec)
    assert all(a.model.params[k].tobytes() == b.model.params[k].tobytes() for k in a.model.params)
    assert a.history == b.history


def test_training_errors():
    ds = toy_dataset(20)
    with pytest.raises(TrainingError):
        training.train(TrainConfig(val_size=20), ds)
    spec = ModelSpec(arch="mlp", input_shape=(1, 8, 8), hidden=(4,), num_classes=2)
    with pytest.raises(TrainingError, match="epoch 0 batch 1"):
        training.train(TrainConfig(method="natural", lr=1e30, val_size=5, schedule="constant",
                                   epochs=2, batch_size=5), ds, spec)
