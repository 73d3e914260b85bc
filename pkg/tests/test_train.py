import json
from pathlib import Path

import numpy as np
import pytest

from dqlstm import dispatch, qlstm, tasks, train
from dqlstm.qlstm import PartitionPlan, QlstmCell, QlstmState
from dqlstm.qsim import ShapeError
from dqlstm.train import ClassicalLstmCell, TrainingConfig

import oracles

GOLDEN = Path(__file__).parent / "golden"


def test_mse_examples():
    assert train.mse_loss([1, 2], [1, 2]) == 0
    assert train.mse_loss([1, 1], [0, 2]) == 1.0
    assert train.mse_loss([3], [1]) == 4.0
    with pytest.raises(ShapeError):
        train.mse_loss([1, 2], [1])


def test_r_squared_examples():
    y = np.array([1.0, 3.0, 2.0, 5.0])
    assert train.r_squared(y, y) == 1.0
    assert train.r_squared(np.full(4, y.mean()), y) == 0.0
    assert train.r_squared([0, 0], [-1, 1]) == 0.0
    with pytest.raises(train.UndefinedMetricError):
        train.r_squared([1, 2], [3, 3])


def test_r_squared_mse_consistency():
    rng = np.random.default_rng(0)
    y, p = rng.normal(size=40), rng.normal(size=40)
    ss_tot = np.sum((y - y.mean()) ** 2)
    assert train.r_squared(p, y) == pytest.approx(1 - train.mse_loss(p, y) * 40 / ss_tot, abs=1e-12)


@pytest.mark.parametrize("losses, epoch", [
    ([5, 4, 3, 3, 3], 3),
    ([2, 2, 2], 1),
    ([10, 1, 10, 1, 1], 4),
    ([8, 4, 2, 1], 4),
    ([8, 4, 1, 1.04], 3),
    ([3, 1, 2], 0),
])
def test_convergence_epoch(losses, epoch):
    assert train.convergence_epoch(losses) == epoch


def test_sgd_examples():
    assert train.sgd_step([1.0], [2.0], 0.1) == pytest.approx([0.8])
    assert np.array_equal(train.sgd_step([1.0, 2.0], [0.0, 0.0], 0.1), [1.0, 2.0])
    assert np.array_equal(train.sgd_step([1.0], [5.0], 0.0), [1.0])
    with pytest.raises(ShapeError):
        train.sgd_step([1.0], [1.0, 2.0], 0.1)


def test_rmsprop_examples():
    theta, s = train.rmsprop_step([0.0], [1.0], None, 0.01, 0.9, 1e-8)
    assert s == pytest.approx([0.1], abs=1e-15)
    assert theta[0] == pytest.approx(-0.01 / (np.sqrt(0.1) + 1e-8), abs=1e-15)
    assert theta[0] == pytest.approx(-0.031623, abs=5e-7)
    same, s2 = train.rmsprop_step(theta, [0.0], s, 0.01)
    assert np.array_equal(same, theta) and s2 == pytest.approx(0.9 * s)
    t1, s1 = train.rmsprop_step([0.0], [1.0], None, 0.01)
    t2, _ = train.rmsprop_step(t1, [1.0], s1, 0.01)
    assert abs(t2[0] - t1[0]) < abs(t1[0])
    with pytest.raises(ShapeError):
        train.rmsprop_step([0.0], [1.0], [0.0, 0.0], 0.01)


@pytest.mark.parametrize("optimizer, lr", [("sgd", 0.05), ("rmsprop", 0.01)])
def test_optimizers_decrease_convex_quadratic(optimizer, lr):
    a = np.diag([1.0, 3.0, 0.5])
    theta = np.array([2.0, -1.0, 1.5])
    opt = train.Optimizer(TrainingConfig(learning_rate=lr, optimizer=optimizer))
    losses = []
    for _ in range(100):
        losses.append(0.5 * theta @ a @ theta)
        theta = opt.step(theta, a @ theta)
    assert np.all(np.diff(losses) < 0)


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(rho=1.0)
    with pytest.raises(ValueError):
        TrainingConfig(eps=0)
    with pytest.raises(ValueError):
        TrainingConfig(optimizer="adam")
    with pytest.raises(ValueError):
        TrainingConfig(gradient_mode="adjoint")


def test_classical_step_zero_weights():
    cell = ClassicalLstmCell(2, 3)
    state, cache = train.classical_lstm_step(cell, np.zeros(2), QlstmState.zeros(3))
    assert np.all(cache.f == 0.5) and np.all(cache.i == 0.5) and np.all(cache.o == 0.5)
    assert np.all(cache.g == 0) and np.all(state.cell == 0) and np.all(state.hidden == 0)


def test_classical_step_saturated_forget_gate():
    rng = np.random.default_rng(0)
    cell = ClassicalLstmCell.create(2, 3, seed=1)
    cell.biases[cell.gate_block("f")] = 100.0
    prev = QlstmState(rng.normal(size=3), rng.normal(size=3))
    state, cache = train.classical_lstm_step(cell, rng.normal(size=2), prev)
    assert np.allclose(cache.f, 1.0, atol=1e-12)
    assert np.allclose(state.cell, prev.cell + cache.i * cache.g, atol=1e-12)


def _loss_of(model, inputs, targets):
    def fn(flat):
        saved = model.get_params()
        model.set_params(flat)
        preds, _ = train.forward(model, inputs)
        model.set_params(saved)
        return np.array([train.mse_loss(preds, targets)])
    return fn


def test_classical_bptt_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = ClassicalLstmCell.create(2, 3, seed=3)
    x = rng.normal(size=(5, 2))
    y = rng.normal(size=5)
    loss, grad = train.bptt_gradients(model, x, y)
    fd = oracles.fd_jacobian(_loss_of(model, x, y), model.get_params())[0]
    assert loss == _loss_of(model, x, y)(model.get_params())[0]
    assert np.max(np.abs(grad - fd)) < 1e-6


def small_qlstm(seed):
    plan = PartitionPlan.equal(1, 1, 1, 2)
    cell = QlstmCell.create(1, 1, plan, depth=1, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for gate in qlstm.GATES:
        cell.banks[gate] = [rng.uniform(-np.pi, np.pi, 4)]
    return cell, rng.uniform(-1, 1, (3, 1)), rng.uniform(-1, 1, 3)


def test_qlstm_bptt_single_seed():
    cell, x, y = small_qlstm(0)
    _, grad = train.bptt_gradients(cell, x, y)
    fd = oracles.fd_jacobian(_loss_of(cell, x, y), cell.get_params())[0]
    assert np.max(np.abs(grad - fd)) < 1e-5


def test_single_step_single_parameter_toy():
    plan = PartitionPlan(1, [2], [1], [2])
    cell = QlstmCell.create(1, 1, plan, depth=1, seed=2)
    x, y = np.array([[0.4]]), np.array([0.3])
    _, grad = train.bptt_gradients(cell, x, y)
    k = cell.bank_offset("o", 0)

    def loss_at(theta):
        flat = cell.get_params()
        flat[k] = theta[0]
        return _loss_of(cell, x, y)(flat)

    fd = oracles.fd_jacobian(loss_at, [cell.get_params()[k]])[0, 0]
    assert grad[k] == pytest.approx(fd, abs=1e-5)


def test_readout_gradient_closed_form():
    cell, x, y = small_qlstm(5)
    hs, preds, _ = qlstm.sequence_forward(cell, x)
    _, grad = train.bptt_gradients(cell, x, y)
    resid = hs @ cell.readout_weights + cell.readout_bias - y
    assert np.allclose(grad[-2:-1], 2 / 3 * hs.T @ resid, atol=1e-14)
    assert grad[-1] == pytest.approx(2 / 3 * resid.sum(), abs=1e-14)


def _per_step_gradient(model, inputs, targets):
    """Oracle for truncate=0: each loss term differentiated with its incoming
    state frozen at the forward-pass value."""
    _, caches = train.forward(model, inputs)
    base = model.get_params()
    steps = len(targets)
    total = np.zeros_like(base)
    for s in range(steps):
        prev = QlstmState(caches[s - 1].h, caches[s - 1].c) if s else QlstmState.zeros(model.hidden_dim)

        def term(flat, s=s, prev=prev):
            model.set_params(flat)
            if isinstance(model, QlstmCell):
                state, _ = qlstm.cell_step(model, inputs[s], prev)
            else:
                state, _ = train.classical_lstm_step(model, inputs[s], prev)
            pred = model.readout(state.hidden)
            model.set_params(base)
            return np.array([(pred - targets[s]) ** 2 / steps])

        total += oracles.fd_jacobian(term, base)[0]
    return total


@pytest.mark.parametrize("kind", ["classical", "quantum"])
def test_truncate_zero_is_per_step(kind):
    if kind == "classical":
        model = ClassicalLstmCell.create(1, 2, seed=4)
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(4, 1)), rng.normal(size=4)
    else:
        model, x, y = small_qlstm(9)
    _, grad = train.bptt_gradients(model, x, y, truncate=0)
    assert np.max(np.abs(grad - _per_step_gradient(model, x, y))) < 1e-6
    _, full = train.bptt_gradients(model, x, y)
    assert np.max(np.abs(full - grad)) > 1e-6


def test_truncation_longer_than_sequence_is_full_bptt():
    model, x, y = small_qlstm(2)
    _, full = train.bptt_gradients(model, x, y)
    _, trunc = train.bptt_gradients(model, x, y, truncate=10)
    assert np.max(np.abs(full - trunc)) < 1e-14


def test_finite_difference_mode_matches_shift_rule():
    model, x, y = small_qlstm(6)
    _, shift = train.bptt_gradients(model, x, y)
    _, fd = train.bptt_gradients(model, x, y, mode="finite-difference")
    assert np.max(np.abs(shift - fd)) < 1e-6


def test_bptt_needs_cached_inputs():
    model, x, y = small_qlstm(1)
    _, _, caches = qlstm.sequence_forward(model, x)
    caches[1].v = None
    with pytest.raises(ValueError):
        train.bptt_gradients(model, x, y, caches=caches)


def pendulum_dataset(windows, window=3):
    rows = tasks.generate_series("pendulum", tasks.PendulumParams(num_steps=windows + window - 1))
    return tasks.make_dataset(tasks.target_series("pendulum", rows), window=window)


def test_zero_learning_rate_keeps_losses_constant():
    ds = pendulum_dataset(30, window=1)
    cell = QlstmCell.create(1, 1, PartitionPlan.equal(1, 1, 1, 2), depth=1, seed=0)
    rec = train.train_loop(cell, ds, TrainingConfig(epochs=3, learning_rate=0.0))
    assert len(set(rec.test_losses)) == 1 and len(set(rec.train_losses)) == 1


def test_classical_lstm_learns_linear_series():
    # output of a linear ODE (damped oscillator)
    params = tasks.OscillatorParams(omega0=1.0, zeta=0.1, dt=0.1, num_steps=150)
    series = tasks.simulate_oscillator(params)[:, 0]
    ds = tasks.make_dataset(series, window=3)
    model = ClassicalLstmCell.create(3, 4, seed=0)
    rec = train.train_loop(model, ds, TrainingConfig(epochs=50, learning_rate=0.02))
    _, test_y = ds.split_arrays("test")
    assert rec.test_losses[-1] < np.var(test_y)


def test_divergence_is_reported():
    ds = pendulum_dataset(30)
    model = ClassicalLstmCell.create(3, 2, seed=0)
    model.readout_weights[:] = np.nan
    with pytest.raises(train.TrainingDiverged) as info:
        train.train_loop(model, ds, TrainingConfig(epochs=2))
    assert info.value.epoch == 1


def smoke_run(executor=None):
    # 3 qubits, 50 windows, 5 epochs
    ds = pendulum_dataset(50, window=2)
    cell = QlstmCell.create(2, 1, PartitionPlan(1, [3], [1], [3]), depth=1, seed=7)
    return train.train_loop(cell, ds, TrainingConfig(epochs=5, learning_rate=0.05, seed=7),
                            executor=executor)


def test_golden_smoke_trajectory():
    rec = smoke_run()
    golden = json.loads((GOLDEN / "smoke_losses.json").read_text())
    assert np.max(np.abs(np.array(rec.train_losses) - golden["train"])) < 1e-12
    assert np.max(np.abs(np.array(rec.test_losses) - golden["test"])) < 1e-12


def test_training_is_deterministic_across_executors():
    a = smoke_run()
    with dispatch.WorkerPool(dispatch.inprocess_pool(2)) as pool:
        b = smoke_run(pool)
    assert a.train_losses == b.train_losses and a.test_losses == b.test_losses
    assert a.r2 == b.r2 and np.array_equal(a.test_predictions, b.test_predictions)


def test_minibatch_mode_updates_per_chunk():
    ds = pendulum_dataset(40)
    calls = []
    model = ClassicalLstmCell.create(3, 2, seed=0)
    real = train.bptt_gradients

    def spy(*args, **kwargs):
        calls.append(len(args[2]))
        return real(*args, **kwargs)

    train.bptt_gradients = spy
    try:
        train.train_loop(model, ds, TrainingConfig(epochs=1, batch_size=10))
    finally:
        train.bptt_gradients = real
    assert calls == [10, 10, 7]


def test_train_loop_writes_artifacts(tmp_path):
    ds = pendulum_dataset(30)
    model = ClassicalLstmCell.create(3, 2, seed=0)
    rec = train.train_loop(model, ds, TrainingConfig(epochs=2), output_dir=tmp_path,
                           checkpoint_extra={"dataset": {"window": 3}})
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_loss" and len(lines) == 3
    preds = (tmp_path / "predictions.csv").read_text().splitlines()
    assert preds[0] == "t,target,prediction" and len(preds) == 1 + len(ds.split_times("test"))
    doc = qlstm.load_checkpoint(tmp_path / "checkpoint.json")
    assert doc["dataset"] == {"window": 3}
    again = train.model_from_dict(doc)
    assert np.array_equal(again.get_params(), model.get_params())
    assert rec.r2 <= 1
