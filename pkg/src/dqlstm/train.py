"""Hybrid training: losses, metrics, optimizers, BPTT and the epoch loop.

Gradients of the QLSTM are exact: the classical chain rule runs through
the activations and the cell recursion, and at every VQC boundary the
Jacobians come from parameter-shift jobs submitted to the executor.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import qlstm, vqc
from .dispatch import JobRequest, SequentialExecutor
from .qlstm import GATES, QlstmCell, StepCache, lstm_update
from .qsim import ShapeError

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "rmsprop")


class UndefinedMetricError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch


# -- metrics ---------------------------------------------------------------


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} predictions vs {y.size} targets")
    if p.size == 0:
        raise ShapeError("need at least one prediction")
    return p, y


def mse_loss(predictions, targets) -> float:
    p, y = _pair(predictions, targets)
    return float(np.mean((p - y) ** 2))


def r_squared(predictions, targets) -> float:
    p, y = _pair(predictions, targets)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("targets have zero variance")
    return 1.0 - float(np.sum((p - y) ** 2)) / ss_tot


def convergence_epoch(test_losses) -> int:
    """First 1-based epoch within 5% of the best loss that never leaves that band.

    Returns 0 when the final epoch is itself outside the band (the run never
    settled).
    """
    losses = np.asarray(test_losses, dtype=float)
    if losses.size == 0:
        raise ValueError("no losses")
    bound = 1.05 * losses.min()
    above = np.nonzero(losses > bound)[0]
    if above.size == 0:
        return 1
    if above[-1] == losses.size - 1:
        return 0
    return int(above[-1]) + 2


# -- optimizers ------------------------------------------------------------


def sgd_step(params, grads, lr):
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ShapeError(f"params {params.shape} vs grads {grads.shape}")
    return params - lr * grads


def rmsprop_step(params, grads, state, lr, rho=0.9, eps=1e-8):
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    state = np.zeros_like(params) if state is None else np.asarray(state, dtype=float)
    if not params.shape == grads.shape == state.shape:
        raise ShapeError(f"params {params.shape}, grads {grads.shape}, state {state.shape}")
    state = rho * state + (1 - rho) * grads**2
    return params - lr * grads / (np.sqrt(state) + eps), state


@dataclass
class TrainingConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    optimizer: str = "rmsprop"
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: Optional[int] = None
    gradient_mode: str = "parameter-shift"
    truncate: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 < self.rho < 1:
            raise ValueError("rho must be in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gradient_mode not in vqc.GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {vqc.GRADIENT_MODES}")
        if self.truncate is not None and self.truncate < 0:
            raise ValueError("truncate must be >= 0")


class Optimizer:
    def __init__(self, config: TrainingConfig):
        self.config = config
        self.state = None

    def step(self, params, grads):
        cfg = self.config
        if cfg.optimizer == "sgd":
            return sgd_step(params, grads, cfg.learning_rate)
        params, self.state = rmsprop_step(params, grads, self.state, cfg.learning_rate,
                                          cfg.rho, cfg.eps)
        return params


# -- classical baseline ----------------------------------------------------


class ClassicalLstmCell:
    """Affine-gated LSTM; ``weights`` rows are grouped f, i, C, o."""

    def __init__(self, input_dim, hidden_dim, weights=None, biases=None,
                 readout_weights=None, readout_bias=0.0, seed=None):
        if input_dim < 1 or hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be >= 1")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        d = input_dim + hidden_dim
        self.weights = np.zeros((4 * hidden_dim, d)) if weights is None else np.asarray(weights, dtype=float)
        self.biases = np.zeros(4 * hidden_dim) if biases is None else np.asarray(biases, dtype=float)
        if self.weights.shape != (4 * hidden_dim, d) or self.biases.shape != (4 * hidden_dim,):
            raise ShapeError("weight/bias shapes do not match dimensions")
        self.readout_weights = (np.zeros(hidden_dim) if readout_weights is None
                                else np.asarray(readout_weights, dtype=float))
        self.readout_bias = float(readout_bias)

    @classmethod
    def create(cls, input_dim, hidden_dim, seed=0):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden_dim)
        d = input_dim + hidden_dim
        return cls(input_dim, hidden_dim,
                   rng.uniform(-bound, bound, (4 * hidden_dim, d)),
                   rng.uniform(-bound, bound, 4 * hidden_dim),
                   rng.uniform(-0.5, 0.5, hidden_dim), 0.0, seed=seed)

    def gate_block(self, gate):
        k = GATES.index(gate)
        return slice(k * self.hidden_dim, (k + 1) * self.hidden_dim)

    def get_params(self):
        return np.concatenate([self.weights.ravel(), self.biases,
                               self.readout_weights, [self.readout_bias]])

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {flat.shape}")
        nw = self.weights.size
        nb = self.biases.size
        self.weights = flat[:nw].reshape(self.weights.shape).copy()
        self.biases = flat[nw:nw + nb].copy()
        self.readout_weights = flat[nw + nb:nw + nb + self.hidden_dim].copy()
        self.readout_bias = float(flat[-1])

    @property
    def num_params(self):
        return self.weights.size + self.biases.size + self.hidden_dim + 1

    def readout(self, h):
        return float(self.readout_weights @ h + self.readout_bias)

    def label(self):
        return f"Classical LSTM (d_h={self.hidden_dim})"

    def to_dict(self):
        return {
            "model": "classical-lstm",
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "seed": self.seed,
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "readout": {"weights": self.readout_weights.tolist(), "bias": self.readout_bias},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["input_dim"], data["hidden_dim"], np.array(data["weights"]),
                   np.array(data["biases"]), np.array(data["readout"]["weights"]),
                   data["readout"]["bias"], seed=data.get("seed"))


def classical_lstm_step(cell: ClassicalLstmCell, x_t, state: qlstm.QlstmState):
    v = qlstm.concat_input(state.hidden, x_t, cell.hidden_dim, cell.input_dim)
    z = cell.weights @ v + cell.biases
    raw = {gate: z[cell.gate_block(gate)] for gate in GATES}
    cache = lstm_update(raw, state.cell, v)
    return qlstm.QlstmState(cache.h, cache.c), cache


# -- forward / backward ----------------------------------------------------


def forward(model, inputs, executor=None):
    """Unroll ``model`` from a zero state; returns (predictions, caches)."""
    if isinstance(model, QlstmCell):
        _, preds, caches = qlstm.sequence_forward(model, inputs, executor=executor)
        return preds, caches
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("need a non-empty (T, input_dim) sequence")
    state = qlstm.QlstmState.zeros(model.hidden_dim)
    preds, caches = [], []
    for x_t in inputs:
        state, cache = classical_lstm_step(model, x_t, state)
        preds.append(model.readout(state.hidden))
        caches.append(cache)
    return np.array(preds), caches


def step_backward(cache: StepCache, dh, dc_next):
    """Backprop one timestep. Returns (raw-gate grads, grad w.r.t. c_{t-1})."""
    dc = dc_next + dh * cache.o * (1.0 - cache.tanh_c**2)
    d_raw = {
        "f": dc * cache.c_prev * cache.f * (1.0 - cache.f),
        "i": dc * cache.g * cache.i * (1.0 - cache.i),
        "C": dc * cache.i * (1.0 - cache.g**2),
        "o": dh * cache.tanh_c * cache.o * (1.0 - cache.o),
    }
    return d_raw, dc * cache.f


def _recurse(caches, d_pred, readout_w, hidden_dim, accumulate, truncate):
    """Run the cell recursion backwards.

    ``accumulate(t, d_raw)`` adds parameter gradients for step ``t`` and
    returns d(loss)/d(v_t). With ``truncate=k`` each loss term flows back at
    most ``k`` steps through the hidden and cell states.
    """
    steps = len(caches)
    if truncate is None:
        dh_next = np.zeros(hidden_dim)
        dc_next = np.zeros(hidden_dim)
        for t in range(steps - 1, -1, -1):
            dh = readout_w * d_pred[t] + dh_next
            d_raw, dc_next = step_backward(caches[t], dh, dc_next)
            dv = accumulate(t, d_raw)
            dh_next = dv[:hidden_dim]
        return
    for s in range(steps):
        dh = readout_w * d_pred[s]
        dc = np.zeros(hidden_dim)
        for t in range(s, max(-1, s - truncate - 1), -1):
            d_raw, dc = step_backward(caches[t], dh, dc)
            dh = accumulate(t, d_raw)[:hidden_dim]


def _readout_grads(caches, d_pred):
    hs = np.array([c.h for c in caches])
    return hs.T @ d_pred, float(np.sum(d_pred))


def _quantum_jacobians(cell: QlstmCell, caches, executor, mode, need_input):
    """Parameter and input Jacobians of every (t, gate, partition) sub-VQC."""
    plan = cell.plan
    offs = plan.input_offsets()
    keys, jobs = [], []
    for t, cache in enumerate(caches):
        pieces = qlstm.partition_input(cache.v, plan)
        for gate in GATES:
            for m, cfg in enumerate(cell.configs):
                params = cell.banks[gate][m]
                keys.append(("theta", t, gate, m))
                jobs.append(JobRequest(len(jobs), "param_shift_gradient", cfg, params, pieces[m]))
                if need_input and t > 0 and offs[m] < cell.hidden_dim:
                    keys.append(("x", t, gate, m))
                    jobs.append(JobRequest(len(jobs), "input_jacobian", cfg, params, pieces[m]))
    if mode == "finite-difference":
        payloads = []
        for job in jobs:
            fn = vqc.fd_param_gradient if job.kind == "param_shift_gradient" else vqc.fd_input_jacobian
            payloads.append(fn(job.config, job.params, job.features))
    else:
        executor = executor or SequentialExecutor()
        results = executor.submit_batch(jobs)
        payloads = []
        for key, result in zip(keys, results):
            if not result.ok:
                raise qlstm.GateExecutionError(key[2], key[3], result.message)
            payloads.append(result.payload)
    return dict(zip(keys, payloads))


def bptt_gradients(model, inputs, targets, caches=None, executor=None,
                   mode="parameter-shift", truncate=None):
    """MSE loss of one sequence and its gradient w.r.t. ``model.get_params()``."""
    targets = np.asarray(targets, dtype=float).ravel()
    if caches is None:
        preds, caches = forward(model, inputs, executor)
    else:
        preds = np.array([model.readout(c.h) for c in caches])
    if len(caches) != targets.size:
        raise ShapeError(f"{len(caches)} cached steps vs {targets.size} targets")
    if any(c.v is None for c in caches):
        raise ValueError("caches lack the forward inputs needed for BPTT")
    loss = mse_loss(preds, targets)
    d_pred = 2.0 * (preds - targets) / targets.size
    d_h = model.hidden_dim
    grad = np.zeros(model.num_params)

    if isinstance(model, QlstmCell):
        jac = _quantum_jacobians(model, caches, executor, mode, need_input=truncate != 0)
        in_offs = model.plan.input_offsets()
        out_offs = model.plan.output_offsets()
        bank_slices = {
            (gate, m): slice(model.bank_offset(gate, m),
                             model.bank_offset(gate, m) + cfg.num_params)
            for gate in GATES for m, cfg in enumerate(model.configs)
        }

        def accumulate(t, d_raw):
            dv = np.zeros(in_offs[-1])
            for gate in GATES:
                for m in range(model.plan.num_partitions):
                    d_out = d_raw[gate][out_offs[m]:out_offs[m + 1]]
                    grad[bank_slices[gate, m]] += d_out @ jac["theta", t, gate, m]
                    jx = jac.get(("x", t, gate, m))
                    if jx is not None:
                        dv[in_offs[m]:in_offs[m + 1]] += d_out @ jx
            return dv
    else:
        n_w = model.weights.size
        g_w = np.zeros_like(model.weights)
        g_b = np.zeros_like(model.biases)
        stacked = model.weights

        def accumulate(t, d_raw):
            dz = np.concatenate([d_raw[gate] for gate in GATES])
            g_w[...] += np.outer(dz, caches[t].v)
            g_b[...] += dz
            return dz @ stacked

    _recurse(caches, d_pred, model.readout_weights, d_h, accumulate, truncate)
    if not isinstance(model, QlstmCell):
        grad[:n_w] = g_w.ravel()
        grad[n_w:n_w + g_b.size] = g_b
    g_out, g_bias = _readout_grads(caches, d_pred)
    grad[-d_h - 1:-1] = g_out
    grad[-1] = g_bias
    return loss, grad


# -- training loop ---------------------------------------------------------


@dataclass
class MetricsRecord:
    train_losses: List[float] = field(default_factory=list)
    test_losses: List[float] = field(default_factory=list)
    r2: float = float("nan")
    convergence_epoch: int = 0
    test_times: np.ndarray = None
    test_targets: np.ndarray = None
    test_predictions: np.ndarray = None


def _chunks(n, size):
    if size is None or size >= n:
        return [slice(0, n)]
    return [slice(k, min(k + size, n)) for k in range(0, n, size)]


def evaluate_split(model, dataset, executor=None, split="test"):
    """Predictions (physical units) on one split, plus the normalized MSE."""
    inputs, targets = dataset.split_arrays(split)
    preds, _ = forward(model, inputs, executor)
    loss = mse_loss(preds, targets)
    return dataset.inverse(preds), dataset.inverse(targets), loss


def train_loop(model, dataset, config: TrainingConfig, executor=None,
               output_dir=None, checkpoint_extra=None) -> MetricsRecord:
    executor = executor or SequentialExecutor()
    optimizer = Optimizer(config)
    train_x, train_y = dataset.split_arrays("train")
    record = MetricsRecord()
    for epoch in range(1, config.epochs + 1):
        sq_err, count = 0.0, 0
        for chunk in _chunks(len(train_y), config.batch_size):
            loss, grads = bptt_gradients(model, train_x[chunk], train_y[chunk],
                                         executor=executor, mode=config.gradient_mode,
                                         truncate=config.truncate)
            if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
                raise TrainingDiverged(epoch, loss)
            sq_err += loss * (chunk.stop - chunk.start)
            count += chunk.stop - chunk.start
            model.set_params(optimizer.step(model.get_params(), grads))
        train_loss = sq_err / count
        _, _, test_loss = evaluate_split(model, dataset, executor)
        if not np.isfinite(test_loss):
            raise TrainingDiverged(epoch, test_loss)
        record.train_losses.append(train_loss)
        record.test_losses.append(test_loss)
        log.info("epoch %d train %.6g test %.6g", epoch, train_loss, test_loss)
    preds, targets, _ = evaluate_split(model, dataset, executor)
    record.test_predictions = preds
    record.test_targets = targets
    record.test_times = dataset.split_times("test")
    record.r2 = r_squared(preds, targets)
    record.convergence_epoch = convergence_epoch(record.test_losses)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", record)
        write_predictions_csv(out / "predictions.csv", record.test_times, targets, preds)
        qlstm.save_checkpoint(out / "checkpoint.json", model_to_dict(model),
                              **(checkpoint_extra or {}))
    return record


def model_to_dict(model) -> dict:
    if isinstance(model, QlstmCell):
        return qlstm.cell_to_dict(model)
    return model.to_dict()


def model_from_dict(data: dict):
    if data.get("model") == "qlstm":
        return qlstm.cell_from_dict(data)
    if data.get("model") == "classical-lstm":
        return ClassicalLstmCell.from_dict(data)
    raise ValueError(f"unknown model {data.get('model')!r}")


def write_metrics_csv(path, record: MetricsRecord):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "test_loss"])
        for k, (tr, te) in enumerate(zip(record.train_losses, record.test_losses), 1):
            writer.writerow([k, repr(float(tr)), repr(float(te))])


def write_predictions_csv(path, times, targets, predictions):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "target", "prediction"])
        for t, y, p in zip(times, targets, predictions):
            writer.writerow([int(t), repr(float(y)), repr(float(p))])
