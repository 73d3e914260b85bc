"""Benchmark series (damped pendulum/oscillator, NARMA) and windowed datasets.

NARMA orders: ``n == 2`` uses

    y[t+1] = a*y[t] + b*y[t]*y[t-1] + c*u[t]**3 + d,    (a,b,c,d) = (.4,.4,.6,.1)

and ``n >= 3`` uses the usual NARMA-n recurrence

    y[t+1] = a*y[t] + b*y[t]*sum(y[t-n+1..t]) + c*u[t-n+1]*u[t] + d

with default coefficients (0.3, 0.05, 1.5, 0.1).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

NARMA2_COEFFS = (0.4, 0.4, 0.6, 0.1)
NARMA_N_COEFFS = (0.3, 0.05, 1.5, 0.1)
DIVERGENCE_BOUND = 10.0
NORMALIZATIONS = ("minmax", "zscore", "none")


class GenerationError(RuntimeError):
    pass


def rk4(deriv: Callable, y0, dt: float, num_steps: int) -> np.ndarray:
    """Classic fixed-step RK4; returns ``num_steps + 1`` states including ``y0``."""
    y = np.asarray(y0, dtype=float)
    out = np.empty((num_steps + 1,) + y.shape)
    out[0] = y
    for k in range(num_steps):
        k1 = deriv(y)
        k2 = deriv(y + 0.5 * dt * k1)
        k3 = deriv(y + 0.5 * dt * k2)
        k4 = deriv(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y
    return out


@dataclass
class PendulumParams:
    damping: float = 0.3
    mass: float = 1.0
    gravity: float = 9.81
    length: float = 1.0
    theta0: float = 0.0
    omega0: float = 3.0
    dt: float = 0.01
    num_steps: int = 2000

    def __post_init__(self):
        if self.mass <= 0 or self.length <= 0 or self.gravity <= 0:
            raise ValueError("mass, length and gravity must be positive")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.dt <= 0 or self.num_steps < 1:
            raise ValueError("dt must be positive and num_steps >= 1")


@dataclass
class OscillatorParams:
    omega0: float = 1.0
    zeta: float = 0.1
    x0: float = 1.0
    v0: float = 0.0
    dt: float = 0.01
    num_steps: int = 2000

    def __post_init__(self):
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.dt <= 0 or self.num_steps < 1:
            raise ValueError("dt must be positive and num_steps >= 1")


def simulate_pendulum(params: PendulumParams) -> np.ndarray:
    """Columns (theta, omega) at t = 0, dt, ..., num_steps*dt."""
    damp = params.damping / params.mass
    stiff = params.gravity / params.length

    def deriv(y):
        return np.array([y[1], -damp * y[1] - stiff * np.sin(y[0])])

    return rk4(deriv, (params.theta0, params.omega0), params.dt, params.num_steps)


def simulate_oscillator(params: OscillatorParams) -> np.ndarray:
    """Columns (x, v) at t = 0, dt, ..., num_steps*dt."""
    w0 = params.omega0
    c = 2 * params.zeta * w0

    def deriv(y):
        return np.array([y[1], -c * y[1] - w0 * w0 * y[0]])

    return rk4(deriv, (params.x0, params.v0), params.dt, params.num_steps)


def underdamped_solution(params: OscillatorParams, t) -> np.ndarray:
    """Closed-form x(t) for 0 <= zeta < 1."""
    if not 0 <= params.zeta < 1:
        raise ValueError("closed form needs 0 <= zeta < 1")
    t = np.asarray(t, dtype=float)
    w0, z = params.omega0, params.zeta
    wd = w0 * np.sqrt(1 - z * z)
    a = params.x0
    b = (params.v0 + z * w0 * params.x0) / wd
    return np.exp(-z * w0 * t) * (a * np.cos(wd * t) + b * np.sin(wd * t))


@dataclass
class NarmaParams:
    order: int = 2
    length: int = 500
    input_mode: str = "trig"
    period: float = 100.0
    seed: int = 0
    coefficients: Optional[tuple] = None

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("NARMA order must be >= 2")
        if self.length <= self.order:
            raise ValueError("length must exceed the order")
        if self.input_mode not in ("trig", "uniform"):
            raise ValueError("input_mode must be 'trig' or 'uniform'")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.coefficients is None:
            self.coefficients = NARMA2_COEFFS if self.order == 2 else NARMA_N_COEFFS
        self.coefficients = tuple(float(c) for c in self.coefficients)
        if len(self.coefficients) != 4:
            raise ValueError("need four coefficients (a, b, c, d)")


def narma_input(params: NarmaParams) -> np.ndarray:
    t = np.arange(params.length)
    if params.input_mode == "uniform":
        return np.random.default_rng(params.seed).uniform(0.0, 0.5, params.length)
    p = params.period
    return 0.5 * np.sin(2 * np.pi * t / p) * np.cos(2 * np.pi * t / (2 * p)) + 0.25


def narma_recurrence(u, order: int, coefficients, y_init=None) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    a, b, c, d = coefficients
    y = np.zeros(u.size)
    if y_init is not None:
        y[:order] = y_init
    for t in range(order - 1, u.size - 1):
        if order == 2:
            nxt = a * y[t] + b * y[t] * y[t - 1] + c * u[t] ** 3 + d
        else:
            nxt = (a * y[t] + b * y[t] * y[t - order + 1:t + 1].sum()
                   + c * u[t - order + 1] * u[t] + d)
        if not abs(nxt) <= DIVERGENCE_BOUND:
            raise GenerationError(f"NARMA-{order} diverged at step {t + 1} (y={nxt})")
        y[t + 1] = nxt
    return y


def generate_narma(params: NarmaParams) -> np.ndarray:
    """Columns (u, y); the first ``order`` outputs are zero."""
    u = narma_input(params)
    y = narma_recurrence(u, params.order, params.coefficients)
    return np.column_stack([u, y])


# -- datasets --------------------------------------------------------------


@dataclass
class Normalizer:
    mode: str
    a: float = 0.0
    b: float = 1.0

    @classmethod
    def fit(cls, values, mode: str) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        if mode == "none":
            return cls(mode)
        if mode == "minmax":
            lo, hi = float(values.min()), float(values.max())
            if hi == lo:
                raise ValueError("zero range: cannot min-max normalize a constant series")
            return cls(mode, lo, hi)
        if mode == "zscore":
            mean, std = float(values.mean()), float(values.std())
            if std == 0.0:
                raise ValueError("zero variance: cannot z-score a constant series")
            return cls(mode, mean, std)
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")

    def transform(self, x):
        x = np.asarray(x, dtype=float)
        if self.mode == "minmax":
            return 2.0 * (x - self.a) / (self.b - self.a) - 1.0
        if self.mode == "zscore":
            return (x - self.a) / self.b
        return x.copy()

    def inverse(self, z):
        z = np.asarray(z, dtype=float)
        if self.mode == "minmax":
            return (z + 1.0) * 0.5 * (self.b - self.a) + self.a
        if self.mode == "zscore":
            return z * self.b + self.a
        return z.copy()


@dataclass
class TimeSeriesDataset:
    """Sliding windows over one series; rows ``< split`` are training data.

    ``inputs[k]`` is ``series[k : k+window]`` and ``targets[k]`` is
    ``series[k+window]``, both normalized. ``times[k]`` is the index of the
    target in the source series.
    """

    inputs: np.ndarray
    targets: np.ndarray
    times: np.ndarray
    split: int
    normalizer: Normalizer
    window: int

    def split_arrays(self, which: str):
        rows = self._rows(which)
        return self.inputs[rows], self.targets[rows]

    def split_times(self, which: str):
        return self.times[self._rows(which)]

    def _rows(self, which):
        if which == "train":
            return slice(0, self.split)
        if which == "test":
            return slice(self.split, len(self.targets))
        raise ValueError("split must be 'train' or 'test'")

    def inverse(self, z):
        return self.normalizer.inverse(z)


def make_dataset(series, window: int = 3, train_fraction: float = 0.67,
                 normalization: str = "minmax") -> TimeSeriesDataset:
    series = np.asarray(series, dtype=float).ravel()
    if window < 1:
        raise ValueError("window must be >= 1")
    if series.size <= window + 1:
        raise ValueError(f"series of {series.size} values is too short for window {window}")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = series.size - window
    split = int(round(n * train_fraction))
    if not 1 <= split < n:
        raise ValueError("train/test split leaves an empty side")
    # statistics cover only values seen by training windows and targets
    normalizer = Normalizer.fit(series[:split + window], normalization)
    z = normalizer.transform(series)
    idx = np.arange(n)[:, None] + np.arange(window)[None, :]
    return TimeSeriesDataset(z[idx], z[window:], np.arange(window, series.size),
                             split, normalizer, window)


# -- CSV -------------------------------------------------------------------

TASK_COLUMNS = {
    "pendulum": ("t", "theta", "omega"),
    "oscillator": ("t", "x", "v"),
    "narma": ("t", "u", "y"),
}
TARGET_COLUMN = {"pendulum": "omega", "oscillator": "x", "narma": "y"}


def generate_series(task: str, params) -> np.ndarray:
    """Rows ``(t, col1, col2)`` for ``task``; ``t`` is time (s) or the step index."""
    if task == "pendulum":
        data = simulate_pendulum(params)
        t = params.dt * np.arange(data.shape[0])
    elif task == "oscillator":
        data = simulate_oscillator(params)
        t = params.dt * np.arange(data.shape[0])
    elif task == "narma":
        data = generate_narma(params)
        t = np.arange(data.shape[0], dtype=float)
    else:
        raise ValueError(f"unknown task {task!r}")
    return np.column_stack([t, data])


def write_series_csv(path, task: str, rows: np.ndarray, params=None):
    """Write the series plus a ``<name>.meta.json`` sidecar with the generator parameters."""
    path = Path(path)
    columns = TASK_COLUMNS[task]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            t = int(row[0]) if task == "narma" else repr(float(row[0]))
            writer.writerow([t] + [repr(float(v)) for v in row[1:]])
    meta = {"task": task, "columns": list(columns), "rows": int(rows.shape[0])}
    if params is not None:
        meta["params"] = asdict(params)
    metadata_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_series_csv(path):
    """Return (task, rows) from a dataset CSV written by :func:`write_series_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        rows = [[float(v) for v in row] for row in reader if row]
    for task, columns in TASK_COLUMNS.items():
        if header == columns:
            return task, np.array(rows, dtype=float).reshape(-1, 3)
    raise ValueError(f"{path}: unrecognized header {','.join(header)}")


def target_series(task: str, rows: np.ndarray) -> np.ndarray:
    return rows[:, TASK_COLUMNS[task].index(TARGET_COLUMN[task])]
