"""Variational quantum circuits: construction, evaluation and gradients.

Circuit layout for a config with ``q`` qubits and ``L`` layers::

    [H on every qubit]                        (optional, default on)
    RY(atan x_j), RZ(atan x_j^2) on qubit j   for each input feature j
    L x ( CNOT ring i -> (i+1) mod q ; RY(p), RZ(p) on every qubit )
    measure <Z_k> for k < output_dim

Parameter ``2*(layer*q + qubit)`` drives the RY of that qubit/layer and the
next index drives its RZ, so a circuit carries exactly ``2*q*L`` angles.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import qsim
from .qsim import CircuitSpec, ShapeError

SHIFT = np.pi / 2
GRADIENT_MODES = ("parameter-shift", "finite-difference")


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class VqcConfig:
    num_qubits: int
    depth: int
    input_dim: int
    output_dim: int
    hadamard: bool = True

    def __post_init__(self):
        if self.num_qubits < 1:
            raise ValueError("num_qubits must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if not 0 <= self.input_dim <= self.num_qubits:
            raise ValueError(f"input_dim {self.input_dim} exceeds {self.num_qubits} qubits")
        if not 1 <= self.output_dim <= self.num_qubits:
            raise ValueError(f"output_dim {self.output_dim} exceeds {self.num_qubits} qubits")

    @property
    def num_params(self) -> int:
        return 2 * self.num_qubits * self.depth


@lru_cache(maxsize=256)
def build_circuit(config: VqcConfig) -> CircuitSpec:
    q = config.num_qubits
    gates = []
    if config.hadamard:
        gates += [qsim.h(k) for k in range(q)]
    for j in range(config.input_dim):
        gates.append(qsim.ry(j, enc=2 * j))
        gates.append(qsim.rz(j, enc=2 * j + 1))
    for layer in range(config.depth):
        if q > 1:
            gates += [qsim.cnot(k, (k + 1) % q) for k in range(q)]
        for k in range(q):
            base = 2 * (layer * q + k)
            gates.append(qsim.ry(k, param=base))
            gates.append(qsim.rz(k, param=base + 1))
    return CircuitSpec(
        num_qubits=q,
        gates=tuple(gates),
        num_encoding_angles=2 * config.input_dim,
        num_variational_params=config.num_params,
        observables=tuple(range(config.output_dim)),
    )


def init_params(config: VqcConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=config.num_params)


def encode_features(features) -> np.ndarray:
    """Map features to (atan x, atan x^2) angle pairs, interleaved."""
    x = np.asarray(features, dtype=float)
    if not np.all(np.isfinite(x)):
        raise EncodingError(f"non-finite feature in {x.tolist()}")
    angles = np.empty(x.shape[:-1] + (2 * x.shape[-1],))
    angles[..., 0::2] = np.arctan(x)
    angles[..., 1::2] = np.arctan(x * x)
    return angles


def _encoding_slopes(x: np.ndarray) -> np.ndarray:
    slopes = np.empty(2 * x.shape[-1])
    slopes[0::2] = 1.0 / (1.0 + x * x)
    slopes[1::2] = 2.0 * x / (1.0 + x**4)
    return slopes


def _check(config: VqcConfig, params, features):
    params = np.asarray(params, dtype=float).ravel()
    features = np.asarray(features, dtype=float).ravel()
    if params.shape[0] != config.num_params:
        raise ShapeError(f"expected {config.num_params} parameters, got {params.shape[0]}")
    if features.shape[0] != config.input_dim:
        raise ShapeError(f"expected {config.input_dim} features, got {features.shape[0]}")
    return params, features


def _run(config: VqcConfig, enc: np.ndarray, params: np.ndarray) -> np.ndarray:
    spec = build_circuit(config)
    amps = qsim.simulate_batch(spec, enc, params)
    return qsim.expectations_z(amps, config.num_qubits, spec.observables)


def evaluate(config: VqcConfig, params, features) -> np.ndarray:
    params, features = _check(config, params, features)
    enc = encode_features(features)
    return _run(config, enc[None, :], params[None, :])[0]


def _shift_rows(base: np.ndarray, delta: float) -> np.ndarray:
    """Rows ``base + delta*e_p`` followed by rows ``base - delta*e_p``."""
    n = base.shape[0]
    eye = np.eye(n) * delta
    return np.concatenate([base + eye, base - eye])


def param_shift_gradient(config: VqcConfig, params, features) -> np.ndarray:
    """d<Z_k>/d(param p) as an (output_dim, num_params) matrix."""
    params, features = _check(config, params, features)
    n = config.num_params
    if n == 0:
        return np.zeros((config.output_dim, 0))
    enc = np.repeat(encode_features(features)[None, :], 2 * n, axis=0)
    out = _run(config, enc, _shift_rows(params, SHIFT))
    return 0.5 * (out[:n] - out[n:]).T


def input_jacobian(config: VqcConfig, params, features) -> np.ndarray:
    """d<Z_k>/d(feature j) as an (output_dim, input_dim) matrix."""
    params, features = _check(config, params, features)
    m = 2 * config.input_dim
    if m == 0:
        return np.zeros((config.output_dim, 0))
    enc = encode_features(features)
    par = np.repeat(params[None, :], 2 * m, axis=0)
    out = _run(config, _shift_rows(enc, SHIFT), par)
    d_angle = 0.5 * (out[:m] - out[m:]).T
    weighted = d_angle * _encoding_slopes(features)
    return weighted[:, 0::2] + weighted[:, 1::2]


def fd_param_gradient(config: VqcConfig, params, features, step: float = 1e-5) -> np.ndarray:
    params, features = _check(config, params, features)
    n = config.num_params
    if n == 0:
        return np.zeros((config.output_dim, 0))
    enc = np.repeat(encode_features(features)[None, :], 2 * n, axis=0)
    out = _run(config, enc, _shift_rows(params, step))
    return ((out[:n] - out[n:]) / (2 * step)).T


def fd_input_jacobian(config: VqcConfig, params, features, step: float = 1e-5) -> np.ndarray:
    params, features = _check(config, params, features)
    m = config.input_dim
    if m == 0:
        return np.zeros((config.output_dim, 0))
    shifted = _shift_rows(features, step)
    par = np.repeat(params[None, :], 2 * m, axis=0)
    out = _run(config, encode_features(shifted), par)
    return ((out[:m] - out[m:]) / (2 * step)).T


def parameter_gradient(config, params, features, mode="parameter-shift"):
    if mode == "parameter-shift":
        return param_shift_gradient(config, params, features)
    if mode == "finite-difference":
        return fd_param_gradient(config, params, features)
    raise ValueError(f"unknown gradient mode {mode!r}")


def feature_jacobian(config, params, features, mode="parameter-shift"):
    if mode == "parameter-shift":
        return input_jacobian(config, params, features)
    if mode == "finite-difference":
        return fd_input_jacobian(config, params, features)
    raise ValueError(f"unknown gradient mode {mode!r}")
