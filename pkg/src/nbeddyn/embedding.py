"""Delay embeddings and the classical lag / dimension selectors."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import TimeSeries
from .errors import DataError

logger = logging.getLogger(__name__)


def _scalar(series) -> np.ndarray:
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        if values.shape[1] != 1:
            raise DataError(f"expected a scalar series, got {values.shape[1]} columns")
        values = values[:, 0]
    return values


@dataclass
class DelayEmbedding:
    """Row ``m`` is ``[x_m, x_{m-tau}, ..., x_{m-(d_E-1)tau}]`` for ``m >= (d_E-1)tau``."""

    tau: int
    d_E: int
    data: np.ndarray

    @property
    def offset(self) -> int:
        """Index in the source series of the first row."""
        return (self.d_E - 1) * self.tau


def delay_vectors(x: np.ndarray, tau: int, d_E: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    span = (d_E - 1) * tau
    if tau < 1 or d_E < 1:
        raise ValueError("tau and d_E must be positive")
    if len(x) <= span:
        raise DataError(f"series of length {len(x)} too short for tau={tau}, d_E={d_E}")
    M = len(x) - span
    return np.column_stack([x[span - k * tau : span - k * tau + M] for k in range(d_E)])


def delay_embed(series, tau: int, d_E: int) -> DelayEmbedding:
    return DelayEmbedding(int(tau), int(d_E), delay_vectors(_scalar(series), tau, d_E))


class LagEstimate(NamedTuple):
    tau: int
    curve: np.ndarray  # curve[k] is the statistic at lag k + 1
    fallback: bool  # True when no crossing / local minimum was found


def _check_lag_inputs(x, max_lag):
    if not 1 <= max_lag < len(x) / 2:
        raise ValueError(f"max_lag must be in [1, T/2), got {max_lag} for T={len(x)}")
    if np.ptp(x) == 0:
        raise DataError("constant series")


def mutual_information(x: np.ndarray, lag: int, bins: int = 32) -> float:
    """Histogram estimate (equal-width bins over the series range) of MI(x_t, x_{t-lag}) in nats."""
    lo, hi = float(np.min(x)), float(np.max(x))
    idx = np.minimum(((x - lo) / (hi - lo) * bins).astype(int), bins - 1)
    a, b = idx[lag:], idx[:-lag]
    joint = np.bincount(a * bins + b, minlength=bins * bins).reshape(bins, bins) / len(a)
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])))


def lag_by_mutual_information(series, max_lag: int = 50, bins: int = 32, window: int = 3) -> LagEstimate:
    """First significant local minimum of the lagged mutual information.

    A lag counts as a minimum when its value is the smallest within
    ``+-window`` lags (histogram estimates of near-periodic signals jitter from
    lag to lag) and lies below the lag-1 value by more than the histogram
    estimator's bias scale ``(bins - 1)^2 / (2 N)``. Without such a lag the
    argmin is returned with ``fallback`` set and a warning.
    """
    x = _scalar(series)
    _check_lag_inputs(x, max_lag)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    last = min(max_lag + window, len(x) - 2)
    mi = np.array([mutual_information(x, k, bins) for k in range(1, last + 1)])
    tol = (bins - 1) ** 2 / (2.0 * len(x))
    for k in range(1, max_lag):
        lo, hi = max(k - window, 0), min(k + window + 1, len(mi))
        if mi[k] < mi[k - 1] and mi[k] <= mi[lo:hi].min() and mi[0] - mi[k] > tol:
            return LagEstimate(k + 1, mi[:max_lag], False)
    tau = int(np.argmin(mi[:max_lag])) + 1
    warnings.warn(f"no significant minimum of mutual information up to lag {max_lag}; using argmin {tau}", stacklevel=2)
    return LagEstimate(tau, mi[:max_lag], True)


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags ``1..max_lag`` (biased estimator, FFT based)."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = len(x)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1]
    return acov[1:] / acov[0]


def lag_by_autocorrelation(series, max_lag: int = 100) -> LagEstimate:
    """First lag at which the autocorrelation drops below ``1/e``."""
    x = _scalar(series)
    _check_lag_inputs(x, max_lag)
    acf = autocorrelation(x, max_lag)
    below = np.nonzero(acf < np.exp(-1.0))[0]
    if below.size:
        return LagEstimate(int(below[0]) + 1, acf, False)
    warnings.warn(f"autocorrelation stays above 1/e up to lag {max_lag}", stacklevel=2)
    return LagEstimate(max_lag, acf, True)


def false_nearest_fraction(x: np.ndarray, tau: int, d: int, rtol: float = 10.0, atol: float = 2.0) -> float:
    """Fraction of false nearest neighbours when lifting a ``d``-dim delay embedding to ``d+1``.

    A neighbour pair is false if the added coordinate separates it by more than
    ``rtol`` times the ``d``-dim distance, or if the lifted distance exceeds
    ``atol`` times the series standard deviation.
    """
    x = np.asarray(x, dtype=float)
    # the lifted coordinate is the sample tau ahead of the newest one
    lifted = delay_vectors(x, tau, d + 1)
    base = lifted[:, 1:]
    extra = lifted[:, 0]
    tree = cKDTree(base)
    dist, idx = tree.query(base, k=2)
    r = dist[:, 1]
    nn = idx[:, 1]
    valid = r > 0
    if not np.any(valid):
        return 0.0
    sep = np.abs(extra - extra[nn])
    crit1 = sep[valid] / r[valid] > rtol
    crit2 = np.sqrt(r[valid] ** 2 + sep[valid] ** 2) / np.std(x) > atol
    return float(np.mean(crit1 | crit2))


def embedding_dim_fnn(
    series,
    tau: int,
    max_dim: int = 10,
    rtol: float = 10.0,
    atol: float = 2.0,
    threshold: float = 0.01,
) -> tuple[int, np.ndarray]:
    """Smallest dimension whose false-nearest-neighbour fraction is below ``threshold``.

    Returns ``(d_E, fractions)`` where ``fractions[k]`` belongs to dimension ``k + 1``.
    """
    x = _scalar(series)
    if len(x) <= max_dim * tau + 10:
        raise DataError(f"series too short for max_dim={max_dim} at tau={tau}")
    fractions = []
    for d in range(1, max_dim + 1):
        frac = false_nearest_fraction(x, tau, d, rtol, atol)
        fractions.append(frac)
        if frac < threshold:
            return d, np.array(fractions)
    logger.warning("FNN fraction never dropped below %.3f up to dimension %d", threshold, max_dim)
    return max_dim, np.array(fractions)
