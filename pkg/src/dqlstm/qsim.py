"""Dense statevector simulation for small qubit registers.

Bit order is little-endian: qubit 0 is the least-significant bit of the
amplitude index, so for two qubits the basis order is |q1 q0> =
|00>, |01>, |10>, |11>.

Gates are applied in place by viewing the amplitude array as
``(batch, high, 2, low)`` around the target bit. The batched entry point
:func:`simulate_batch` runs one circuit topology for many angle sets at
once; it is what the variational layer uses for forward passes and
parameter-shift gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

MAX_QUBITS = 24

GATE_KINDS = ("H", "RX", "RY", "RZ", "CNOT")
ROTATIONS = ("RX", "RY", "RZ")

_SQRT_HALF = np.sqrt(0.5)


class SizeError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Gate:
    """One elementary gate.

    Rotations take their angle from exactly one source: a literal
    ``angle`` in radians, ``enc`` (index into the encoding-angle vector) or
    ``param`` (index into the variational parameter vector).
    """

    kind: str
    target: int
    control: Optional[int] = None
    angle: Optional[float] = None
    enc: Optional[int] = None
    param: Optional[int] = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.target < 0:
            raise IndexError(f"negative target qubit {self.target}")
        if self.kind == "CNOT":
            if self.control is None:
                raise ValueError("CNOT needs a control qubit")
            if self.control < 0:
                raise IndexError(f"negative control qubit {self.control}")
            if self.control == self.target:
                raise ValueError("control and target must differ")
        elif self.control is not None:
            raise ValueError(f"{self.kind} takes no control qubit")
        sources = sum(s is not None for s in (self.angle, self.enc, self.param))
        if self.kind in ROTATIONS:
            if sources != 1:
                raise ValueError(f"{self.kind} needs exactly one angle source")
        elif sources:
            raise ValueError(f"{self.kind} takes no angle")

    @property
    def qubits(self) -> tuple:
        if self.control is None:
            return (self.target,)
        return (self.control, self.target)


def h(target: int) -> Gate:
    return Gate("H", target)


def cnot(control: int, target: int) -> Gate:
    return Gate("CNOT", target, control=control)


def rx(target: int, **source) -> Gate:
    return Gate("RX", target, **source)


def ry(target: int, **source) -> Gate:
    return Gate("RY", target, **source)


def rz(target: int, **source) -> Gate:
    return Gate("RZ", target, **source)


@dataclass(frozen=True)
class CircuitSpec:
    num_qubits: int
    gates: tuple
    num_encoding_angles: int = 0
    num_variational_params: int = 0
    observables: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        object.__setattr__(self, "observables", tuple(self.observables))
        _check_size(self.num_qubits)
        for gate in self.gates:
            for qubit in gate.qubits:
                if qubit >= self.num_qubits:
                    raise IndexError(
                        f"{gate.kind} touches qubit {qubit} of a {self.num_qubits}-qubit register"
                    )
            if gate.enc is not None and not 0 <= gate.enc < self.num_encoding_angles:
                raise IndexError(f"encoding index {gate.enc} out of range")
            if gate.param is not None and not 0 <= gate.param < self.num_variational_params:
                raise IndexError(f"parameter index {gate.param} out of range")
        if len(set(self.observables)) != len(self.observables):
            raise ValueError("observables must be distinct")
        for qubit in self.observables:
            if not 0 <= qubit < self.num_qubits:
                raise IndexError(f"observable qubit {qubit} out of range")


class Statevector:
    """Amplitudes of a ``num_qubits`` register (complex128, length 2**q)."""

    def __init__(self, num_qubits: int, amplitudes=None):
        _check_size(num_qubits)
        self.num_qubits = num_qubits
        if amplitudes is None:
            amplitudes = np.zeros(2**num_qubits, dtype=np.complex128)
            amplitudes[0] = 1.0
        else:
            amplitudes = np.array(amplitudes, dtype=np.complex128)
            if amplitudes.shape != (2**num_qubits,):
                raise ShapeError(
                    f"expected {2**num_qubits} amplitudes, got shape {amplitudes.shape}"
                )
        self.amplitudes = amplitudes

    def copy(self) -> "Statevector":
        return Statevector(self.num_qubits, self.amplitudes.copy())

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def __repr__(self):
        return f"Statevector(num_qubits={self.num_qubits})"


def _check_size(num_qubits: int, cap: int = None):
    cap = MAX_QUBITS if cap is None else cap
    if not isinstance(num_qubits, (int, np.integer)) or not 1 <= num_qubits <= cap:
        raise SizeError(f"qubit count must be in [1, {cap}], got {num_qubits}")


def new_statevector(num_qubits: int) -> Statevector:
    return Statevector(num_qubits)


# -- kernels ---------------------------------------------------------------
# All kernels act in place on ``amps`` of shape (batch, 2**q). Angle
# arguments are arrays of shape (batch,).


def _split(amps: np.ndarray, num_qubits: int, target: int):
    view = amps.reshape(amps.shape[0], 2 ** (num_qubits - target - 1), 2, 2**target)
    return view[:, :, 0, :], view[:, :, 1, :]


def _apply_h(amps, num_qubits, target):
    a0, a1 = _split(amps, num_qubits, target)
    s = a0 + a1
    a1 -= a0
    a1 *= -_SQRT_HALF
    a0[...] = s * _SQRT_HALF


def _apply_ry(amps, num_qubits, target, theta):
    a0, a1 = _split(amps, num_qubits, target)
    c = np.cos(theta / 2)[:, None, None]
    s = np.sin(theta / 2)[:, None, None]
    new0 = c * a0 - s * a1
    a1 *= c
    a1 += s * a0
    a0[...] = new0


def _apply_rx(amps, num_qubits, target, theta):
    a0, a1 = _split(amps, num_qubits, target)
    c = np.cos(theta / 2)[:, None, None]
    s = (-1j * np.sin(theta / 2))[:, None, None]
    new0 = c * a0 + s * a1
    a1 *= c
    a1 += s * a0
    a0[...] = new0


def _apply_rz(amps, num_qubits, target, theta):
    a0, a1 = _split(amps, num_qubits, target)
    phase = np.exp(0.5j * theta)[:, None, None]
    a0 *= phase.conj()
    a1 *= phase


@lru_cache(maxsize=None)
def _cnot_pairs(num_qubits: int, control: int, target: int):
    idx = np.arange(2**num_qubits)
    src = idx[((idx >> control) & 1 == 1) & ((idx >> target) & 1 == 0)]
    return src, src | (1 << target)


def _apply_cnot(amps, num_qubits, control, target):
    i0, i1 = _cnot_pairs(num_qubits, control, target)
    tmp = amps[:, i0]
    amps[:, i0] = amps[:, i1]
    amps[:, i1] = tmp


def _apply(amps, num_qubits, gate: Gate, theta=None):
    kind = gate.kind
    if kind == "RY":
        _apply_ry(amps, num_qubits, gate.target, theta)
    elif kind == "RZ":
        _apply_rz(amps, num_qubits, gate.target, theta)
    elif kind == "CNOT":
        _apply_cnot(amps, num_qubits, gate.control, gate.target)
    elif kind == "H":
        _apply_h(amps, num_qubits, gate.target)
    else:
        _apply_rx(amps, num_qubits, gate.target, theta)


def _angle(gate: Gate, encoding_angles: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Per-row angle of ``gate``; inputs are (batch, n) matrices."""
    if gate.param is not None:
        return params[:, gate.param]
    if gate.enc is not None:
        return encoding_angles[:, gate.enc]
    return np.full(params.shape[0], float(gate.angle))


# -- public API ------------------------------------------------------------


def apply_gate(state: Statevector, gate: Gate, encoding_angles=(), params=()) -> Statevector:
    """Apply ``gate`` to ``state`` in place and return it."""
    for qubit in gate.qubits:
        if qubit >= state.num_qubits:
            raise IndexError(f"qubit {qubit} out of range for {state.num_qubits} qubits")
    theta = None
    if gate.kind in ROTATIONS:
        if gate.param is not None:
            if not 0 <= gate.param < len(params):
                raise IndexError(f"parameter index {gate.param} out of range")
            theta = np.array([params[gate.param]], dtype=float)
        elif gate.enc is not None:
            if not 0 <= gate.enc < len(encoding_angles):
                raise IndexError(f"encoding index {gate.enc} out of range")
            theta = np.array([encoding_angles[gate.enc]], dtype=float)
        else:
            theta = np.array([gate.angle], dtype=float)
    amps = state.amplitudes.reshape(1, -1)
    _apply(amps, state.num_qubits, gate, theta)
    return state


def simulate_batch(spec: CircuitSpec, encoding_angles, params) -> np.ndarray:
    """Run ``spec`` once per row of the angle matrices.

    ``encoding_angles`` has shape (batch, num_encoding_angles) and
    ``params`` (batch, num_variational_params). Returns amplitudes with
    shape (batch, 2**num_qubits).
    """
    enc = np.asarray(encoding_angles, dtype=float)
    par = np.asarray(params, dtype=float)
    if enc.ndim != 2 or par.ndim != 2 or enc.shape[0] != par.shape[0]:
        raise ShapeError("angle matrices must be 2-D with a shared batch size")
    if enc.shape[1] != spec.num_encoding_angles:
        raise ShapeError(
            f"expected {spec.num_encoding_angles} encoding angles, got {enc.shape[1]}"
        )
    if par.shape[1] != spec.num_variational_params:
        raise ShapeError(
            f"expected {spec.num_variational_params} parameters, got {par.shape[1]}"
        )
    q = spec.num_qubits
    amps = np.zeros((par.shape[0], 2**q), dtype=np.complex128)
    amps[:, 0] = 1.0
    for gate in spec.gates:
        theta = _angle(gate, enc, par) if gate.kind in ROTATIONS else None
        _apply(amps, q, gate, theta)
    return amps


def run_circuit(spec: CircuitSpec, encoding_angles=(), params=()) -> Statevector:
    enc = np.asarray(encoding_angles, dtype=float).reshape(1, -1)
    par = np.asarray(params, dtype=float).reshape(1, -1)
    amps = simulate_batch(spec, enc, par)
    return Statevector(spec.num_qubits, amps[0])


def expectation_z(state: Statevector, qubit: int) -> float:
    if not 0 <= qubit < state.num_qubits:
        raise IndexError(f"qubit {qubit} out of range for {state.num_qubits} qubits")
    return float(expectations_z(state.amplitudes.reshape(1, -1), state.num_qubits, [qubit])[0, 0])


def expectations_z(amps: np.ndarray, num_qubits: int, qubits: Sequence[int]) -> np.ndarray:
    """<Z_k> for each row of ``amps`` and each qubit in ``qubits``."""
    probs = amps.real**2 + amps.imag**2
    out = np.empty((amps.shape[0], len(qubits)))
    for col, qubit in enumerate(qubits):
        view = probs.reshape(amps.shape[0], 2 ** (num_qubits - qubit - 1), 2, 2**qubit)
        out[:, col] = view[:, :, 0, :].sum(axis=(1, 2)) - view[:, :, 1, :].sum(axis=(1, 2))
    return np.clip(out, -1.0, 1.0)
