"""Delay-embedding baselines: analog (nearest-neighbour) forecasting and
sparse quadratic regression fitted by sequentially thresholded least squares."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .dynamics import write_csv_rows
from .embedding import DelayEmbedding, delay_vectors
from .errors import DataError, DimensionError, IntegrationDivergedError, SchemaError
from .numerics import IntegratorConfig, QuadraticField, flow_trajectory, pair_indices

# ---------------------------------------------------------------------------
# Analog forecasting


@dataclass
class AnalogCatalog:
    predecessors: np.ndarray
    successors: np.ndarray
    k: int = 10
    regression: str = "locally_linear"  # or "locally_constant"
    _tree: cKDTree | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.predecessors = np.atleast_2d(np.asarray(self.predecessors, dtype=float))
        self.successors = np.atleast_2d(np.asarray(self.successors, dtype=float))
        if self.predecessors.shape != self.successors.shape:
            raise DimensionError("predecessor and successor sets must have the same shape")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.regression not in ("locally_linear", "locally_constant"):
            raise ValueError(f"unknown regression kind {self.regression!r}")

    def __len__(self):
        return len(self.predecessors)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.predecessors)
        return self._tree

    @classmethod
    def from_embedding(cls, emb: DelayEmbedding | np.ndarray, k: int = 10, regression: str = "locally_linear") -> "AnalogCatalog":
        data = emb.data if isinstance(emb, DelayEmbedding) else np.asarray(emb, dtype=float)
        return cls(data[:-1], data[1:], k, regression)


def analog_step(catalog: AnalogCatalog, queries: np.ndarray) -> np.ndarray:
    """One-step analog forecast of each row of ``queries``."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    k = catalog.k
    if len(catalog) == 0:
        raise DataError("empty analog catalog")
    if k > len(catalog):
        raise ValueError(f"k={k} exceeds catalog size {len(catalog)}")
    dist, idx = catalog.tree.query(q, k=k)
    if k == 1:
        return catalog.successors[idx]
    succ = catalog.successors[idx]  # Q x k x d
    h = np.median(dist, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(h > 0, np.exp(-((dist / np.where(h > 0, h, 1.0)) ** 2)), 1.0)
    w /= w.sum(axis=1, keepdims=True)
    if catalog.regression == "locally_constant":
        return np.einsum("qk,qkd->qd", w, succ)
    # weighted affine regression centred on the query; the intercept is the forecast
    pred = catalog.predecessors[idx] - q[:, None, :]
    design = np.concatenate([np.ones(pred.shape[:2] + (1,)), pred], axis=2)
    sw = np.sqrt(w)[..., None]
    coef = np.linalg.pinv(sw * design, rcond=1e-10) @ (sw * succ)
    return coef[:, 0, :]


def analog_forecast(catalog: AnalogCatalog, query: np.ndarray, horizon: int) -> np.ndarray:
    """Iterate ``analog_step`` ``horizon`` times; returns ``horizon x d`` (or ``Q x horizon x d``)."""
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    out = np.empty((q.shape[0], horizon, q.shape[1]))
    for h in range(horizon):
        q = analog_step(catalog, q)
        out[:, h] = q
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Sparse regression


def monomial_names(d: int, prefix: str = "x") -> list[str]:
    I, J = pair_indices(d)
    return ["1"] + [f"{prefix}{i + 1}" for i in range(d)] + [f"{prefix}{i + 1}*{prefix}{j + 1}" for i, j in zip(I, J)]


def polynomial_library(X: np.ndarray) -> np.ndarray:
    """Monomials of degree <= 2: ``[1, x_i, x_i x_j (i <= j)]``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    I, J = pair_indices(X.shape[1])
    return np.hstack([np.ones((X.shape[0], 1)), X, X[:, I] * X[:, J]])


@dataclass
class SparseModel:
    coefficients: np.ndarray  # d_E x n_terms
    mask: np.ndarray
    threshold: float
    dt: float = 1.0

    @property
    def dim(self) -> int:
        return self.coefficients.shape[0]

    @property
    def terms(self) -> list[str]:
        return monomial_names(self.dim)

    def field(self) -> QuadraticField:
        d = self.dim
        c = self.coefficients[:, 0]
        A = self.coefficients[:, 1 : d + 1]
        B = self.coefficients[:, d + 1 :]
        return QuadraticField(A, B, c)


def _check_rank(theta: np.ndarray, names: list[str]) -> None:
    _, r, piv = scipy.linalg.qr(theta, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(theta.shape) * np.finfo(float).eps * 1e3 if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < theta.shape[1]:
        bad = [names[i] for i in sorted(piv[rank:])]
        raise np.linalg.LinAlgError(f"rank-deficient regression library; dependent columns: {', '.join(bad)}")


def stlsq(theta: np.ndarray, target: np.ndarray, threshold: float, iterations: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Sequentially thresholded least squares; returns ``(coefficients (d x terms), mask)``."""
    xi = np.linalg.lstsq(theta, target, rcond=None)[0].T
    mask = np.ones_like(xi, dtype=bool)
    for _ in range(iterations):
        new_mask = np.abs(xi) >= threshold
        if np.array_equal(new_mask, mask) and _ > 0:
            break
        mask = new_mask
        xi = np.zeros_like(xi)
        for i in range(target.shape[1]):
            active = mask[i]
            if np.any(active):
                xi[i, active] = np.linalg.lstsq(theta[:, active], target[:, i], rcond=None)[0]
    return xi, mask


def sparse_fit(embedding: DelayEmbedding | np.ndarray, dt: float, threshold: float = 0.05, iterations: int = 10) -> SparseModel:
    """Fit a quadratic vector field to embedded states.

    Time derivatives are centred differences (one-sided at the ends).
    """
    data = embedding.data if isinstance(embedding, DelayEmbedding) else np.asarray(embedding, dtype=float)
    data = np.atleast_2d(data)
    theta = polynomial_library(data)
    if data.shape[0] < theta.shape[1]:
        raise DataError(f"need at least {theta.shape[1]} rows, got {data.shape[0]}")
    _check_rank(theta, monomial_names(data.shape[1]))
    deriv = np.gradient(data, dt, axis=0)
    xi, mask = stlsq(theta, deriv, threshold, iterations)
    return SparseModel(xi, mask, float(threshold), float(dt))


def sparse_forecast(model: SparseModel, query: np.ndarray, horizon: int, substeps: int = 1) -> np.ndarray:
    """Integrate the fitted field from ``query``; returns ``horizon x d`` (or batched)."""
    traj = flow_trajectory(model.field(), np.asarray(query, dtype=float), IntegratorConfig(model.dt, substeps), horizon)
    return np.moveaxis(traj[1:], 0, -2) if traj.ndim == 3 else traj[1:]


def write_sparse_model(path: str | Path, model: SparseModel) -> None:
    rows = [[f"dx{i + 1}/dt"] + [float(v) for v in model.coefficients[i]] for i in range(model.dim)]
    write_csv_rows(path, ["output"] + model.terms, rows)


def read_sparse_model(path: str | Path, dt: float = 1.0, threshold: float = 0.0) -> SparseModel:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "output":
        raise SchemaError(f"{path}: not a sparse model table")
    header = rows[0][1:]
    d = len(rows) - 1
    if header != monomial_names(d):
        raise SchemaError(f"{path}: unexpected monomial columns {header}")
    coef = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return SparseModel(coef, coef != 0, threshold, dt)


# ---------------------------------------------------------------------------
# Forecaster adapters over scalar histories


class DelayForecaster:
    """Shared plumbing: embed the tail of each history, forecast, return the first coordinate."""

    def __init__(self, tau: int, d_E: int):
        self.tau = int(tau)
        self.d_E = int(d_E)

    @property
    def history_needed(self) -> int:
        return (self.d_E - 1) * self.tau + 1

    def _queries(self, histories: np.ndarray) -> np.ndarray:
        h = np.asarray(histories, dtype=float)
        if h.ndim == 3:
            h = h[..., 0]
        if h.shape[1] < self.history_needed:
            raise DataError(f"history of {h.shape[1]} samples shorter than embedding span {self.history_needed}")
        return np.stack([h[:, -1 - k * self.tau] for k in range(self.d_E)], axis=1)


class AnalogForecaster(DelayForecaster):
    def __init__(self, train_series, tau: int, d_E: int, k: int = 10, regression: str = "locally_linear"):
        super().__init__(tau, d_E)
        x = np.asarray(train_series, dtype=float).reshape(-1)
        self.catalog = AnalogCatalog.from_embedding(delay_vectors(x, tau, d_E), k, regression)

    def __call__(self, histories: np.ndarray, horizon: int) -> np.ndarray:
        traj = analog_forecast(self.catalog, self._queries(histories), horizon)
        return traj[..., :1]

    def generate(self, history: np.ndarray, steps: int) -> np.ndarray:
        return self(np.asarray(history)[None], steps)[0, :, 0]


class SparseForecaster(DelayForecaster):
    def __init__(self, train_series, dt: float, tau: int, d_E: int, threshold: float = 0.05):
        super().__init__(tau, d_E)
        x = np.asarray(train_series, dtype=float).reshape(-1)
        self.model = sparse_fit(delay_vectors(x, tau, d_E), dt, threshold)

    def __call__(self, histories: np.ndarray, horizon: int) -> np.ndarray:
        q = self._queries(histories)
        out = np.full((q.shape[0], horizon, 1), np.nan)
        for i, row in enumerate(q):
            try:
                out[i] = sparse_forecast(self.model, row, horizon)[:, :1]
            except IntegrationDivergedError:
                pass  # reported as a divergence by the evaluation
        return out

    def generate(self, history: np.ndarray, steps: int) -> np.ndarray:
        return self(np.asarray(history)[None], steps)[0, :, 0]
