"""Forecast skill tables, largest Lyapunov exponent (Rosenstein) and the
Jacobian eigenvalue spectrum of a trained latent model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import TimeSeries, write_csv_rows
from .embedding import delay_vectors, embedding_dim_fnn, lag_by_mutual_information
from .errors import DataError, DivergedError, IntegrationDivergedError

logger = logging.getLogger(__name__)

Forecaster = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class ForecastReport:
    horizons: list[int]
    rmse: dict[int, float]
    correlation: dict[int, float]
    n_sequences: int
    n_diverged: int = 0

    @property
    def divergence_rate(self) -> float:
        total = self.n_sequences + self.n_diverged
        return self.n_diverged / total if total else 0.0

    def rows(self):
        return [[h, self.rmse[h], self.correlation[h], self.n_sequences, self.n_diverged] for h in self.horizons]

    def to_csv(self, path: str | Path) -> None:
        write_csv_rows(path, ["horizon", "rmse", "correlation", "n_sequences", "n_diverged"], self.rows())


def make_test_windows(series: TimeSeries | np.ndarray, history: int, horizon: int, count: int | None = None, stride: int | None = None) -> np.ndarray:
    """Cut ``K x (history + horizon) x n`` windows from a long test series at a regular stride."""
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    length = history + horizon
    avail = len(values) - length + 1
    if avail < 1:
        raise DataError(f"test series of length {len(values)} shorter than history+horizon={length}")
    if stride is None:
        stride = max(avail // count, 1) if count else length
    starts = np.arange(0, avail, stride)
    if count is not None:
        starts = starts[:count]
    return np.stack([values[s : s + length] for s in starts])


def _run_forecaster(forecaster: Forecaster, histories: np.ndarray, horizon: int) -> np.ndarray:
    try:
        pred = np.asarray(forecaster(histories, horizon), dtype=float)
    except (IntegrationDivergedError, DivergedError, FloatingPointError):
        if len(histories) == 1:
            return np.full((1, horizon, histories.shape[2]), np.nan)
        # isolate the failing windows
        return np.concatenate([_run_forecaster(forecaster, histories[i : i + 1], horizon) for i in range(len(histories))])
    return pred.reshape(len(histories), horizon, -1)


def forecast_rmse(
    forecaster: Forecaster,
    sequences: np.ndarray | Sequence[np.ndarray],
    horizons: Sequence[int],
    history: int,
) -> ForecastReport:
    """Condition on the first ``history`` samples of each sequence and score the forecast.

    RMSE and pooled Pearson correlation are reported per horizon (in steps).
    Windows whose forecast is non-finite or raises are excluded and counted.
    """
    seqs = np.asarray(sequences, dtype=float)
    if seqs.ndim == 2:
        seqs = seqs[..., None]
    horizons = sorted(int(h) for h in horizons)
    if not horizons or horizons[0] < 1 or len(set(horizons)) != len(horizons):
        raise ValueError("horizons must be distinct positive integers")
    hmax = horizons[-1]
    if seqs.shape[1] < history + hmax:
        raise DataError(f"sequences of length {seqs.shape[1]} too short for history {history} + horizon {hmax}")
    pred = _run_forecaster(forecaster, seqs[:, :history], hmax)
    ok = np.all(np.isfinite(pred), axis=(1, 2))
    n_div = int(np.sum(~ok))
    if n_div:
        logger.warning("%d of %d forecasts diverged and are excluded", n_div, len(seqs))
    rmse, corr = {}, {}
    for h in horizons:
        p = pred[ok, h - 1].ravel()
        t = seqs[ok, history + h - 1].ravel()
        if p.size == 0:
            rmse[h], corr[h] = float("nan"), float("nan")
            continue
        rmse[h] = float(np.sqrt(np.mean((p - t) ** 2)))
        if np.std(p) > 0 and np.std(t) > 0:
            corr[h] = float(np.corrcoef(p, t)[0, 1])
        else:
            corr[h] = 1.0 if np.array_equal(p, t) else 0.0
    return ForecastReport(horizons, rmse, corr, int(np.sum(ok)), n_div)


# ---------------------------------------------------------------------------
# Largest Lyapunov exponent


def mean_period(values: np.ndarray) -> float:
    """Mean period (in samples): reciprocal of the power-weighted mean frequency.

    The spectral peak is a poor choice for intermittent signals such as the
    lobe switching of Lorenz-63, whose peak sits at the switching time scale.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    v = v - v.mean(axis=0)
    power = np.sum(np.abs(np.fft.rfft(v, axis=0)) ** 2, axis=1)
    freqs = np.fft.rfftfreq(len(v))
    power[0] = 0.0
    total = float(np.sum(power))
    if total <= 0:
        return float(len(v))
    return float(1.0 / (np.sum(freqs * power) / total))


@dataclass
class LyapunovResult:
    exponent: float
    divergence: np.ndarray  # mean log separation per step
    fit_steps: tuple[int, int]  # first and last step of the fitted segment
    theiler: int
    n_pairs: int


def rosenstein(
    series,
    dt: float,
    tau: int | None = None,
    dim: int | None = None,
    theiler: int | None = None,
    trajectory_len: int | None = None,
    fit_range: tuple[float, float] = (0.5, 2.0),
) -> LyapunovResult:
    """Rosenstein estimate of the largest Lyapunov exponent (per unit time).

    Scalar input is delay-embedded (``tau``/``dim`` default to the mutual
    information and FNN estimates). The Theiler window ``w`` defaults to the
    mean period; the divergence curve spans ``trajectory_len`` steps (default
    ``4 w``) and the slope is fitted between steps ``fit_range[0] * w`` and
    ``fit_range[1] * w``, skipping the initial transient during which the
    neighbour separations rotate onto the unstable direction.
    """
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    if values.ndim == 2 and values.shape[1] == 1:
        values = values[:, 0]
    if len(values) < 500:
        raise DataError(f"series of length {len(values)} too short for a Lyapunov estimate")
    if values.ndim == 1:
        if tau is None:
            tau = lag_by_mutual_information(values, max_lag=min(100, len(values) // 4)).tau
        if dim is None:
            dim = embedding_dim_fnn(values, tau)[0]
        states = delay_vectors(values, tau, dim)
    else:
        states = values
    period = mean_period(values)
    w = int(round(period)) if theiler is None else int(theiler)
    K = int(round(4 * period)) if trajectory_len is None else int(trajectory_len)
    N = len(states) - K
    if N <= 2 * w + 2:
        raise DataError("series too short for the requested Theiler window and trajectory length")
    base = states[:N]
    tree = cKDTree(base)
    # at most 2w+1 points (self included) fall inside the window
    k = min(2 * w + 2, N)
    dist, idx = tree.query(base, k=k)
    ii = np.arange(N)[:, None]
    # pairs closer than round-off (exact repeats of a periodic signal) carry no
    # divergence information; their log separations would only measure rounding
    floor = 1e-9 * max(float(np.sqrt(np.sum(np.var(states, axis=0)))), np.finfo(float).tiny)
    valid = (np.abs(idx - ii) > w) & (dist > floor)
    first = np.argmax(valid, axis=1)
    has = valid[np.arange(N), first]
    if not np.any(has):
        raise DataError("no valid neighbour pairs outside the Theiler window")
    i = np.arange(N)[has]
    j = idx[has, first[has]]
    steps = np.arange(K + 1)
    sep = np.linalg.norm(states[i[:, None] + steps] - states[j[:, None] + steps], axis=-1)
    with np.errstate(divide="ignore"):
        logs = np.log(sep)
    logs[~np.isfinite(logs)] = np.nan
    curve = np.nanmean(logs, axis=0)
    lo = int(round(fit_range[0] * w))
    hi = min(max(int(round(fit_range[1] * w)), lo + 2), K)
    if hi - lo < 2:
        raise DataError(f"fit range {fit_range} leaves fewer than 3 points of the divergence curve")
    sl = slice(lo, hi + 1)
    slope = np.polyfit(steps[sl] * dt, curve[sl], 1)[0]
    return LyapunovResult(float(slope), curve, (lo, hi), w, int(len(i)))


def largest_lyapunov(series, dt: float, **params) -> float:
    return rosenstein(series, dt, **params).exponent


# ---------------------------------------------------------------------------
# Jacobian spectrum


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray  # n_states x d_E, sorted by decreasing modulus
    mean_modulus: np.ndarray
    max_modulus: np.ndarray
    threshold: float
    effective_dimension: int = field(init=False)

    def __post_init__(self):
        top = float(np.max(self.mean_modulus)) if self.mean_modulus.size else 0.0
        self.effective_dimension = int(np.sum(self.mean_modulus > self.threshold * top))

    def gap_ratio(self, k: int) -> float:
        """Smallest mean modulus among the top ``k`` ranks over the largest among the rest."""
        rest = self.mean_modulus[k:]
        if rest.size == 0:
            return float("inf")
        denom = float(np.max(rest))
        return float(np.min(self.mean_modulus[:k]) / denom) if denom > 0 else float("inf")

    def to_csv(self, path: str | Path) -> None:
        top = float(np.max(self.mean_modulus))
        rows = [
            [r + 1, float(self.mean_modulus[r]), float(self.max_modulus[r]), int(self.mean_modulus[r] > self.threshold * top)]
            for r in range(len(self.mean_modulus))
        ]
        write_csv_rows(path, ["rank", "mean_modulus", "max_modulus", "active"], rows)


def spectrum_of_states(field, states: np.ndarray, threshold: float = 1e-2) -> SpectrumReport:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(states) == 0:
        raise DataError("no states to analyse")
    jac = field.jacobian(states)
    try:
        eig = np.linalg.eigvals(jac)
    except np.linalg.LinAlgError:
        for i, J in enumerate(jac):
            try:
                np.linalg.eigvals(J)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(f"eigen-decomposition failed at state {i}") from exc
        raise
    order = np.argsort(-np.abs(eig), axis=1, kind="stable")
    eig = np.take_along_axis(eig, order, axis=1)
    mod = np.abs(eig)
    return SpectrumReport(eig, mod.mean(axis=0), mod.max(axis=0), threshold)


def jacobian_spectrum(trained, sample_stride: int = 1, threshold: float = 1e-2) -> SpectrumReport:
    """Eigenvalue moduli of the field Jacobian along the stored training latent states."""
    X = trained.train_latents.X
    if len(X) == 0:
        raise DataError("trained model has no stored latent trajectory")
    return spectrum_of_states(trained.model, X[:: max(int(sample_stride), 1)], threshold)
