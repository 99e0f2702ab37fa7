"""Ground-truth simulators, observation operators, noise and PCA reduction,
plus the project-wide CSV time-series format."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError
from .numerics import IntegratorConfig, VectorField, flow_trajectory

LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0


@dataclass
class TimeSeries:
    """Uniformly sampled multivariate series; ``values`` is ``T x n``."""

    values: np.ndarray
    dt: float
    start_time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError(f"values must be a non-empty T x n matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("time series contains non-finite values")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DataError(f"dt must be positive, got {self.dt}")
        self.values = v

    def __len__(self):
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(len(self))

    def window(self, start: int, stop: int) -> "TimeSeries":
        return TimeSeries(self.values[start:stop], self.dt, self.start_time + start * self.dt)


class Lorenz63Field(VectorField):
    """Lorenz-63 right-hand side; theta = (sigma, rho, beta)."""

    dim = 3

    def __init__(self, sigma=LORENZ_SIGMA, rho=LORENZ_RHO, beta=LORENZ_BETA):
        self.sigma, self.rho, self.beta = float(sigma), float(rho), float(beta)

    def theta(self):
        return np.array([self.sigma, self.rho, self.beta])

    def with_theta(self, theta):
        return Lorenz63Field(*theta)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        z1, z2, z3 = X[..., 0], X[..., 1], X[..., 2]
        return np.stack(
            [self.sigma * (z2 - z1), z1 * (self.rho - z3) - z2, z1 * z2 - self.beta * z3],
            axis=-1,
        )

    def jacobian(self, X):
        X = np.asarray(X, dtype=float)
        z1, z2, z3 = X[..., 0], X[..., 1], X[..., 2]
        J = np.zeros(X.shape[:-1] + (3, 3))
        J[..., 0, 0] = -self.sigma
        J[..., 0, 1] = self.sigma
        J[..., 1, 0] = self.rho - z3
        J[..., 1, 1] = -1.0
        J[..., 1, 2] = -z1
        J[..., 2, 0] = z2
        J[..., 2, 1] = z1
        J[..., 2, 2] = -self.beta
        return J

    def vjp(self, X, g):
        J = self.jacobian(X)
        gX = np.einsum("ni,nij->nj", g, J)
        z1, z2, z3 = X[:, 0], X[:, 1], X[:, 2]
        gtheta = np.array([np.sum(g[:, 0] * (z2 - z1)), np.sum(g[:, 1] * z1), -np.sum(g[:, 2] * z3)])
        return gX, gtheta

    def param_jacobian(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        F = np.zeros((X.shape[0], 3, 3))
        F[:, 0, 0] = X[:, 1] - X[:, 0]
        F[:, 1, 1] = X[:, 0]
        F[:, 2, 2] = -X[:, 2]
        return F


def simulate_lorenz63(
    z0,
    dt: float = 0.01,
    steps: int = 10000,
    sigma: float = LORENZ_SIGMA,
    rho: float = LORENZ_RHO,
    beta: float = LORENZ_BETA,
    substeps: int = 1,
    transient: int = 0,
) -> TimeSeries:
    """RK4 trajectory of Lorenz-63 with ``steps + 1`` samples (``transient`` extra steps dropped first)."""
    z0 = np.asarray(z0, dtype=float).reshape(3)
    cfg = IntegratorConfig(dt, substeps)
    traj = flow_trajectory(Lorenz63Field(sigma, rho, beta), z0, cfg, steps + transient)
    return TimeSeries(traj[transient:], dt, start_time=transient * dt)


def simulate_linear_complex(alpha: complex = -0.1 - 0.5j, z0: complex = 0.5, dt: float = 0.01, steps: int = 10000, start_time: float = 0.0) -> TimeSeries:
    """Exact samples of ``z(t) = z0 exp(alpha t)`` as columns (Re, Im)."""
    if not dt > 0:
        raise DataError(f"dt must be positive, got {dt}")
    t = start_time + dt * np.arange(steps + 1)
    z = complex(z0) * np.exp(complex(alpha) * t)
    return TimeSeries(np.column_stack([z.real, z.imag]), dt, start_time)


def simulate_two_mode_field(
    grid: int = 32,
    dt: float = 0.05,
    steps: int = 2000,
    omega: float = 1.0,
    noise: float = 0.0,
    seed: int = 0,
    start_time: float = 0.0,
) -> TimeSeries:
    """Synthetic multivariate field ``cos(w t) sin(pi s) + 0.5 cos(2 w t) sin(2 pi s)`` on ``grid`` points.

    The two weights follow a quadratic ODE once ``sin(w t)`` is added as a
    third state, so the field is a small test bed for the PCA pipeline.
    """
    if grid < 2:
        raise DataError("grid needs at least 2 points")
    if not dt > 0:
        raise DataError(f"dt must be positive, got {dt}")
    s = (np.arange(grid) + 0.5) / grid
    t = start_time + dt * np.arange(steps + 1)
    modes = np.vstack([np.sin(np.pi * s), np.sin(2 * np.pi * s)])
    weights = np.column_stack([np.cos(omega * t), 0.5 * np.cos(2 * omega * t)])
    values = weights @ modes
    if noise > 0:
        values = values + noise * np.random.default_rng(seed).standard_normal(values.shape)
    return TimeSeries(values, dt, start_time)


@dataclass(frozen=True)
class ObservationOperator:
    """``kind`` is ``"select"`` (``indices``), ``"real"`` (Re of a (Re, Im) series) or ``"linear"`` (``matrix``)."""

    kind: str
    indices: tuple[int, ...] | None = None
    matrix: np.ndarray | None = None

    @classmethod
    def select(cls, *indices: int) -> "ObservationOperator":
        return cls("select", indices=tuple(int(i) for i in indices))

    @classmethod
    def real_part(cls) -> "ObservationOperator":
        return cls("real")

    @classmethod
    def linear(cls, matrix) -> "ObservationOperator":
        return cls("linear", matrix=np.array(matrix, dtype=float, ndmin=2))

    def apply(self, values: np.ndarray) -> np.ndarray:
        dim = values.shape[-1]
        if self.kind == "select":
            if not self.indices or any(i < 0 or i >= dim for i in self.indices):
                raise DimensionError(f"indices {self.indices} out of range for dimension {dim}")
            return values[..., list(self.indices)]
        if self.kind == "real":
            if dim != 2:
                raise DimensionError("real-part operator expects a 2-column (Re, Im) series")
            return values[..., :1]
        if self.kind == "linear":
            if self.matrix.shape[1] != dim:
                raise DimensionError(f"projection matrix {self.matrix.shape} incompatible with dimension {dim}")
            return values @ self.matrix.T
        raise ValueError(f"unknown observation operator kind {self.kind!r}")


def observe(series: TimeSeries, op: ObservationOperator) -> TimeSeries:
    return TimeSeries(op.apply(series.values), series.dt, series.start_time)


def add_observation_noise(series: TimeSeries, sigma: float, seed: int) -> TimeSeries:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return TimeSeries(series.values.copy(), series.dt, series.start_time)
    rng = np.random.default_rng(seed)
    noisy = series.values + sigma * rng.standard_normal(series.values.shape)
    return TimeSeries(noisy, series.dt, series.start_time)


@dataclass
class PCAReduction:
    mean: np.ndarray
    components: np.ndarray  # n_components x original_dim, orthonormal rows
    explained_variance_ratio: np.ndarray

    def transform(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.mean) @ self.components.T

    def inverse(self, scores: np.ndarray) -> np.ndarray:
        return np.asarray(scores, dtype=float) @ self.components + self.mean

    def report(self) -> str:
        cum = np.cumsum(self.explained_variance_ratio)
        lines = [f"PCA: {len(cum)} components capture {100 * cum[-1]:.2f}% of the variance"]
        for k, (r, c) in enumerate(zip(self.explained_variance_ratio, cum), 1):
            lines.append(f"  PC{k}: {100 * r:.2f}% (cumulative {100 * c:.2f}%)")
        return "\n".join(lines)


def pca_fit(data: np.ndarray, n_components: int) -> PCAReduction:
    """Fit PCA on ``data`` (samples x features) through an SVD of the centred matrix."""
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise DimensionError("data must be a 2-d matrix")
    rows, cols = data.shape
    if not 1 <= n_components <= min(rows, cols):
        raise ValueError(f"n_components must be in [1, {min(rows, cols)}]")
    mean = data.mean(axis=0)
    centred = data - mean
    # work in units of the data magnitude so tiny but valid data cannot underflow when squared
    scale = np.max(np.abs(data))
    if not np.isfinite(scale) or scale == 0:
        raise DataError("data has zero variance")
    _, s, vt = np.linalg.svd(centred / scale, full_matrices=False)
    total = np.sum(s**2)
    # variance at the level of centring round-off counts as none
    noise = (np.finfo(float).eps * rows) ** 2 * data.size
    if not np.isfinite(total) or total <= noise:
        raise DataError("data has zero variance")
    # sign convention: largest-magnitude loading positive, for reproducible components
    comps = vt[:n_components]
    signs = np.sign(comps[np.arange(n_components), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    ratio = s[:n_components] ** 2 / total
    return PCAReduction(mean, comps, ratio)


# ---------------------------------------------------------------------------
# CSV format: header ``t,x1,...,xn``, optional mask columns ``m1,...,mn``


def format_float(v: float) -> str:
    return repr(float(v))


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv_rows(path: str | Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def write_series_csv(path: str | Path, series: TimeSeries, mask: np.ndarray | None = None) -> None:
    n = series.n
    header = ["t"] + [f"x{i + 1}" for i in range(n)]
    if mask is not None:
        header += [f"m{i + 1}" for i in range(n)]
    times = series.times
    rows = []
    for k in range(len(series)):
        row = [format_float(times[k])] + [format_float(v) for v in series.values[k]]
        if mask is not None:
            row += [str(int(bool(m))) for m in mask[k]]
        rows.append(row)
    write_csv_rows(path, header, rows)


def read_series_csv(path: str | Path, with_mask: bool = False):
    """Read a series CSV. Returns a ``TimeSeries``, or ``(TimeSeries, mask)`` when ``with_mask``.

    Masked entries (mask 0) may hold ``nan``; they are zero-filled.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if not header or header[0] != "t":
        raise DataError(f"{path}: first column must be 't'")
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    mcols = [i for i, h in enumerate(header) if h.startswith("m")]
    n = len(xcols)
    if n == 0 or [header[i] for i in xcols] != [f"x{k + 1}" for k in range(n)]:
        raise DataError(f"{path}: expected columns x1..xn, got {header}")
    if mcols and [header[i] for i in mcols] != [f"m{k + 1}" for k in range(n)]:
        raise DataError(f"{path}: mask columns must be m1..m{n}")
    if len(header) != 1 + n + len(mcols):
        raise DataError(f"{path}: unexpected columns in header {header}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows")
    t = data[:, 0]
    values = data[:, 1 : 1 + n]
    mask = data[:, 1 + n :] != 0 if mcols else np.ones_like(values, dtype=bool)
    if len(t) >= 2:
        steps = np.diff(t)
        dt = (t[-1] - t[0]) / (len(t) - 1)
        if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-9 * dt:
            raise DataError(f"{path}: time column is not uniformly sampled")
    else:
        dt = 1.0
    values = np.where(mask, values, 0.0)
    series = TimeSeries(values, float(dt), float(t[0]))
    return (series, mask) if with_mask else series
