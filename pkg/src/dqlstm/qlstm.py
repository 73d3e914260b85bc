"""QLSTM cell with VQC gates, in centric (M=1) or partitioned form.

The concatenated input ``v_t = [h_{t-1}; x_t]`` is split into M contiguous
pieces. Partition m feeds one sub-VQC per gate (forget, input, candidate,
output); the M outputs of a gate are concatenated into its raw vector,
which goes straight into sigmoid/tanh.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import vqc
from .dispatch import JobRequest, SequentialExecutor
from .qsim import ShapeError
from .vqc import VqcConfig

GATES = ("f", "i", "C", "o")
CHECKPOINT_FORMAT = "dqlstm-checkpoint"
CHECKPOINT_VERSION = 1


class GateExecutionError(RuntimeError):
    def __init__(self, gate, partition, message):
        super().__init__(f"gate {gate} partition {partition}: {message}")
        self.gate = gate
        self.partition = partition


def _even_splits(total: int, parts: int) -> List[int]:
    base, extra = divmod(total, parts)
    return [base + 1 if m < extra else base for m in range(parts)]


@dataclass(frozen=True)
class PartitionPlan:
    num_partitions: int
    input_splits: tuple
    output_splits: tuple
    qubits_per_partition: tuple

    def __post_init__(self):
        for name in ("input_splits", "output_splits", "qubits_per_partition"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != self.num_partitions:
                raise ValueError(f"{name} needs {self.num_partitions} entries")
        for m in range(self.num_partitions):
            q = self.qubits_per_partition[m]
            if self.input_splits[m] < 1 or self.output_splits[m] < 1:
                raise ValueError(f"partition {m} has an empty input or output")
            if self.input_splits[m] > q or self.output_splits[m] > q:
                raise ValueError(
                    f"partition {m}: {self.input_splits[m]} inputs / "
                    f"{self.output_splits[m]} outputs do not fit {q} qubits"
                )

    @classmethod
    def equal(cls, input_dim: int, hidden_dim: int, num_partitions: int,
              qubits: Optional[int] = None) -> "PartitionPlan":
        """Equal input split (M must divide D); outputs as even as possible."""
        total = input_dim + hidden_dim
        if num_partitions < 1:
            raise ValueError("need at least one partition")
        if total % num_partitions:
            raise ValueError(f"{num_partitions} partitions do not divide D={total}")
        if hidden_dim < num_partitions:
            raise ValueError(f"hidden_dim {hidden_dim} < {num_partitions} partitions")
        ins = [total // num_partitions] * num_partitions
        outs = _even_splits(hidden_dim, num_partitions)
        qs = [qubits if qubits is not None else max(i, o) for i, o in zip(ins, outs)]
        return cls(num_partitions, ins, outs, qs)

    @property
    def input_dim(self) -> int:
        return sum(self.input_splits)

    @property
    def output_dim(self) -> int:
        return sum(self.output_splits)

    def check(self, input_dim: int, hidden_dim: int):
        if self.input_dim != input_dim + hidden_dim:
            raise ValueError(f"input splits sum to {self.input_dim}, D is {input_dim + hidden_dim}")
        if self.output_dim != hidden_dim:
            raise ValueError(f"output splits sum to {self.output_dim}, d_h is {hidden_dim}")

    def input_offsets(self) -> List[int]:
        return list(np.cumsum((0,) + self.input_splits))

    def output_offsets(self) -> List[int]:
        return list(np.cumsum((0,) + self.output_splits))


def concat_input(h_prev, x_t, hidden_dim: int = None, input_dim: int = None) -> np.ndarray:
    h_prev = np.asarray(h_prev, dtype=float).ravel()
    x_t = np.asarray(x_t, dtype=float).ravel()
    if h_prev.size == 0:
        raise ShapeError("hidden state must have at least one element")
    if hidden_dim is not None and h_prev.size != hidden_dim:
        raise ShapeError(f"hidden state has {h_prev.size} elements, expected {hidden_dim}")
    if input_dim is not None and x_t.size != input_dim:
        raise ShapeError(f"input has {x_t.size} elements, expected {input_dim}")
    return np.concatenate([h_prev, x_t])


def partition_input(v_t, plan: PartitionPlan) -> List[np.ndarray]:
    v_t = np.asarray(v_t, dtype=float).ravel()
    if v_t.size != plan.input_dim:
        raise ShapeError(f"vector of {v_t.size} does not match splits summing to {plan.input_dim}")
    offs = plan.input_offsets()
    return [v_t[offs[m]:offs[m + 1]] for m in range(plan.num_partitions)]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class QlstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int) -> "QlstmState":
        return cls(np.zeros(hidden_dim), np.zeros(hidden_dim))


@dataclass
class StepCache:
    """Forward intermediates of one timestep, kept for the backward pass."""

    v: np.ndarray
    raw: Dict[str, np.ndarray]
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_prev: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def lstm_update(raw: Dict[str, np.ndarray], c_prev, v=None) -> StepCache:
    """Apply the gate activations and the cell/hidden recursion to raw gate vectors."""
    c_prev = np.asarray(c_prev, dtype=float)
    f = sigmoid(raw["f"])
    i = sigmoid(raw["i"])
    g = np.tanh(raw["C"])
    o = sigmoid(raw["o"])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return StepCache(v, dict(raw), f, i, g, o, c_prev, c, tanh_c, h)


@dataclass
class QlstmCell:
    input_dim: int
    hidden_dim: int
    plan: PartitionPlan
    depth: int = 2
    hadamard: bool = True
    banks: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    readout_weights: np.ndarray = None
    readout_bias: float = 0.0
    n_extra: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.hidden_dim < 1 or self.input_dim < 1:
            raise ValueError("input_dim and hidden_dim must be >= 1")
        self.plan.check(self.input_dim, self.hidden_dim)
        self.configs = [
            VqcConfig(q, self.depth, d_in, d_out, self.hadamard)
            for q, d_in, d_out in zip(self.plan.qubits_per_partition,
                                      self.plan.input_splits, self.plan.output_splits)
        ]
        if self.readout_weights is None:
            self.readout_weights = np.zeros(self.hidden_dim)
        self.readout_weights = np.asarray(self.readout_weights, dtype=float)
        for gate in GATES:
            bank = self.banks.get(gate)
            if bank is None:
                raise ValueError(f"missing parameter bank {gate!r}")
            if len(bank) != self.plan.num_partitions:
                raise ValueError(f"bank {gate!r} needs {self.plan.num_partitions} vectors")
            self.banks[gate] = [np.asarray(p, dtype=float) for p in bank]
            for m, params in enumerate(self.banks[gate]):
                if params.shape != (self.configs[m].num_params,):
                    raise ValueError(f"bank {gate!r} partition {m} has shape {params.shape}")

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, plan: PartitionPlan, depth: int = 2,
               hadamard: bool = True, seed: int = 0) -> "QlstmCell":
        rng = np.random.default_rng(seed)
        configs = [VqcConfig(q, depth, d_in, d_out, hadamard)
                   for q, d_in, d_out in zip(plan.qubits_per_partition,
                                             plan.input_splits, plan.output_splits)]
        banks = {gate: [vqc.init_params(cfg, rng) for cfg in configs] for gate in GATES}
        weights = rng.uniform(-0.5, 0.5, size=hidden_dim)
        return cls(input_dim, hidden_dim, plan, depth, hadamard, banks, weights, 0.0, seed=seed)

    # -- flat parameter vector: banks f, i, C, o (partition order), then w, b
    def get_params(self) -> np.ndarray:
        parts = [p for gate in GATES for p in self.banks[gate]]
        return np.concatenate(parts + [self.readout_weights, [self.readout_bias]])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} parameters, got {flat.shape}")
        pos = 0
        for gate in GATES:
            for m, cfg in enumerate(self.configs):
                n = cfg.num_params
                self.banks[gate][m] = flat[pos:pos + n].copy()
                pos += n
        self.readout_weights = flat[pos:pos + self.hidden_dim].copy()
        self.readout_bias = float(flat[pos + self.hidden_dim])

    @property
    def num_gate_params(self) -> int:
        return len(GATES) * sum(cfg.num_params for cfg in self.configs)

    @property
    def num_params(self) -> int:
        return self.num_gate_params + self.hidden_dim + 1

    def bank_offset(self, gate: str, partition: int) -> int:
        per_gate = sum(cfg.num_params for cfg in self.configs)
        return (GATES.index(gate) * per_gate
                + sum(cfg.num_params for cfg in self.configs[:partition]))

    def gate_jobs(self, gate: str, v_t, kind: str = "evaluate", first_id: int = 0):
        pieces = partition_input(v_t, self.plan)
        return [
            JobRequest(first_id + m, kind, cfg, self.banks[gate][m], pieces[m])
            for m, cfg in enumerate(self.configs)
        ]

    def readout(self, h) -> float:
        return float(self.readout_weights @ h + self.readout_bias)

    def label(self) -> str:
        if self.plan.num_partitions == 1:
            return f"Centric QLSTM ({self.plan.qubits_per_partition[0]} qubit)"
        return "Distributed QLSTM"


def _collect(results, gate, offset, count):
    pieces = []
    for m in range(count):
        result = results[offset + m]
        if not result.ok:
            raise GateExecutionError(gate, m, result.message)
        pieces.append(np.asarray(result.payload, dtype=float))
    return np.concatenate(pieces)


def gate_forward(gate: str, cell: QlstmCell, v_t, executor=None) -> np.ndarray:
    """Raw (pre-activation) vector of one gate: M jobs, concatenated in partition order."""
    executor = executor or SequentialExecutor()
    jobs = cell.gate_jobs(gate, v_t)
    return _collect(executor.submit_batch(jobs), gate, 0, len(jobs))


def raw_gates(cell: QlstmCell, v_t, executor=None) -> Dict[str, np.ndarray]:
    """All four raw gate vectors from a single batch of 4*M jobs."""
    executor = executor or SequentialExecutor()
    m = cell.plan.num_partitions
    jobs = []
    for k, gate in enumerate(GATES):
        jobs += cell.gate_jobs(gate, v_t, first_id=k * m)
    results = executor.submit_batch(jobs)
    return {gate: _collect(results, gate, k * m, m) for k, gate in enumerate(GATES)}


def cell_step(cell: QlstmCell, x_t, state: QlstmState, executor=None):
    """One timestep. Returns the new state and the cache for BPTT."""
    hidden = np.asarray(state.hidden, dtype=float)
    c_prev = np.asarray(state.cell, dtype=float)
    if c_prev.shape != (cell.hidden_dim,):
        raise ShapeError(f"cell state has shape {c_prev.shape}, expected ({cell.hidden_dim},)")
    v = concat_input(hidden, x_t, cell.hidden_dim, cell.input_dim)
    cache = lstm_update(raw_gates(cell, v, executor), c_prev, v)
    return QlstmState(cache.h, cache.c), cache


def sequence_forward(cell: QlstmCell, inputs, state: QlstmState = None, executor=None):
    """Unroll over ``inputs`` (T, d_x). Returns (hidden states, predictions, caches)."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("need a non-empty (T, input_dim) sequence")
    state = state or QlstmState.zeros(cell.hidden_dim)
    hs, preds, caches = [], [], []
    for x_t in inputs:
        state, cache = cell_step(cell, x_t, state, executor)
        hs.append(state.hidden)
        preds.append(cell.readout(state.hidden))
        caches.append(cache)
    return np.array(hs), np.array(preds), caches


@dataclass(frozen=True)
class ResourceEstimate:
    p_vqc: int
    p_gates: int
    p_total: int
    total_qubits: int
    per_qpu_qubits: int
    n_extra: int


def estimate_resources(d_x: int, d_h: int, num_partitions: int, depth: int, qubits: int,
                       n_extra: int = 0) -> ResourceEstimate:
    if min(d_x, d_h, num_partitions, depth, qubits) < 1:
        raise ValueError("d_x, d_h, M, L and q must be positive")
    if n_extra < 0:
        raise ValueError("n_extra must be >= 0")
    p_vqc = 2 * qubits * depth
    return ResourceEstimate(
        p_vqc=p_vqc,
        p_gates=4 * num_partitions * p_vqc,
        p_total=(4 + n_extra) * num_partitions * p_vqc,
        total_qubits=num_partitions * qubits,
        per_qpu_qubits=qubits,
        n_extra=n_extra,
    )


# -- checkpoints -----------------------------------------------------------


def cell_to_dict(cell: QlstmCell) -> dict:
    plan = cell.plan
    return {
        "model": "qlstm",
        "input_dim": cell.input_dim,
        "hidden_dim": cell.hidden_dim,
        "depth": cell.depth,
        "hadamard": cell.hadamard,
        "n_extra": cell.n_extra,
        "seed": cell.seed,
        "plan": {
            "num_partitions": plan.num_partitions,
            "input_splits": list(plan.input_splits),
            "output_splits": list(plan.output_splits),
            "qubits_per_partition": list(plan.qubits_per_partition),
        },
        "banks": {gate: [p.tolist() for p in cell.banks[gate]] for gate in GATES},
        "readout": {"weights": cell.readout_weights.tolist(), "bias": cell.readout_bias},
    }


def cell_from_dict(data: dict) -> QlstmCell:
    plan = PartitionPlan(**data["plan"])
    return QlstmCell(
        input_dim=data["input_dim"],
        hidden_dim=data["hidden_dim"],
        plan=plan,
        depth=data["depth"],
        hadamard=data["hadamard"],
        banks={gate: [np.array(p) for p in data["banks"][gate]] for gate in GATES},
        readout_weights=np.array(data["readout"]["weights"]),
        readout_bias=float(data["readout"]["bias"]),
        n_extra=data.get("n_extra", 0),
        seed=data.get("seed"),
    )


def save_checkpoint(path, model_dict: dict, **extra) -> None:
    """Write a versioned JSON checkpoint; ``extra`` sections ride along."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **model_dict, **extra}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return doc
