"""Levenberg-Marquardt refinement of the joint (theta, latent) objective.

The residuals of step ``t`` depend on ``theta``, ``y_{t-1}`` and ``y_t`` only,
so the Gauss-Newton matrix is an arrow: a dense ``theta`` block bordering a
block-tridiagonal latent block. Each step eliminates the latent block with a
banded Cholesky factorisation (Schur complement on ``theta``).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError
from .numerics import IntegratorConfig, VectorField, rk4_step, rk4_step_tangents

logger = logging.getLogger(__name__)


@dataclass
class RefineResult:
    field: VectorField
    y: np.ndarray
    loss: float
    history: list[float] = field(default_factory=list)
    damping: float = 0.0


def joint_loss(field: VectorField, x: np.ndarray, y: np.ndarray, lam: float, cfg: IntegratorConfig) -> float:
    X = np.hstack([x, y])
    n = x.shape[1]
    with np.errstate(over="ignore", invalid="ignore"):
        P = rk4_step(field, X[:-1], cfg)
        loss = np.sum((x[1:] - P[:, :n]) ** 2) + lam * np.sum((X[1:] - P) ** 2)
    return float(loss) if np.isfinite(loss) else math.inf


def _normal_equations(field, x, y, lam, cfg, chunk):
    """Gauss-Newton pieces: half-gradient and the blocks of ``J^T J``."""
    T, n = x.shape
    m = y.shape[1]
    d = n + m
    p = field.n_params
    X = np.hstack([x, y])
    q = np.full(d, lam)
    q[:n] += 1.0

    g_theta = np.zeros(p)
    g_y = np.zeros((T, m))
    H_tt = np.zeros((p, p))
    H_yt = np.zeros((T, m, p))
    D = np.zeros((T, m, m))  # diagonal latent blocks
    U = np.zeros((max(T - 1, 0), m, m))  # H[y_s, y_{s+1}]
    loss = 0.0
    for lo in range(0, T - 1, chunk):
        hi = min(lo + chunk, T - 1)
        P, JX, Jt = rk4_step_tangents(field, X[lo:hi], cfg)
        r_obs = x[lo + 1 : hi + 1] - P[:, :n]
        r_aug = X[lo + 1 : hi + 1] - P
        loss += float(np.sum(r_obs**2) + lam * np.sum(r_aug**2))
        s = lam * r_aug
        s[:, :n] += r_obs
        Jy = JX[:, :, n:]
        QJt = q[None, :, None] * Jt
        g_theta -= np.einsum("cdp,cd->p", Jt, s)
        H_tt += Jt.reshape(-1, p).T @ QJt.reshape(-1, p)
        # residual t = lo+1.. involves y_{t-1} (rows lo..hi-1) and y_t (rows lo+1..hi)
        g_y[lo:hi] -= np.einsum("cdm,cd->cm", Jy, s)
        g_y[lo + 1 : hi + 1] += lam * r_aug[:, n:]
        H_yt[lo:hi] += np.einsum("cdm,cdp->cmp", Jy, QJt)
        H_yt[lo + 1 : hi + 1] -= lam * Jt[:, n:, :]
        D[lo:hi] += np.einsum("cdm,cdk->cmk", Jy, q[None, :, None] * Jy)
        D[lo + 1 : hi + 1] += lam * np.eye(m)
        U[lo:hi] -= lam * np.transpose(Jy[:, n:, :], (0, 2, 1))
    return loss, g_theta, g_y, H_tt, H_yt, D, U


def _banded_upper(D: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Upper banded storage (for ``cholesky_banded``) of a symmetric block-tridiagonal matrix."""
    T, m, _ = D.shape
    u = 2 * m - 1
    ab = np.zeros((u + 1, T * m))
    cols = np.arange(T) * m
    for a in range(m):
        for b in range(a, m):
            ab[u + a - b, cols + b] = D[:, a, b]
    for a in range(m):
        for b in range(m):
            ab[u + a - b - m, cols[1:] + b] = U[:, a, b]
    return ab


def _lm_step(g_theta, g_y, H_tt, H_yt, D, U, mu):
    p = g_theta.size
    T, m = g_y.shape
    A = H_tt + mu * np.diag(np.diag(H_tt) + 1e-12)
    if m == 0:
        return np.linalg.solve(A, -g_theta), np.zeros((T, 0))
    ab = _banded_upper(D, U)
    u = ab.shape[0] - 1
    ab[u] += mu * (ab[u] + 1e-12)
    cb = scipy.linalg.cholesky_banded(ab, lower=False)
    By = H_yt.reshape(T * m, p)
    Z = scipy.linalg.cho_solve_banded((cb, False), By)
    w = scipy.linalg.cho_solve_banded((cb, False), g_y.ravel())
    S = A - By.T @ Z
    rhs = -g_theta + By.T @ w
    try:
        with warnings.catch_warnings():
            # near-singular Schur complements are expected once the fit is tight
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            dtheta = scipy.linalg.solve(S, rhs, assume_a="pos", check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        dtheta = np.linalg.lstsq(S, rhs, rcond=None)[0]
    dy = -w - Z @ dtheta
    return dtheta, dy.reshape(T, m)


def refine_joint(
    field: VectorField,
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    cfg: IntegratorConfig,
    iterations: int = 50,
    damping: float = 1e-3,
    tol: float = 1e-12,
    chunk: int = 2048,
) -> RefineResult:
    """Minimise ``sum_t |x_t - G(Phi(X_{t-1}))|^2 + lam |X_t - Phi(X_{t-1})|^2`` over ``(theta, y)``.

    Starts from ``(field.theta(), y)`` and never returns a worse point. Stops
    after ``iterations`` accepted or rejected steps, when the relative decrease
    falls below ``tol``, or when the damping saturates.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    if x.shape[1] + y.shape[1] != field.dim:
        raise DimensionError(f"observed {x.shape[1]} + latent {y.shape[1]} != field dimension {field.dim}")
    if lam <= 0 and y.shape[1] > 0:
        raise ValueError("latent refinement needs lam > 0")
    theta = field.theta()
    mu = float(damping)
    loss, *blocks = _normal_equations(field, x, y, lam, cfg, chunk)
    history = [loss]
    it = 0
    while it < iterations and mu < 1e12:
        it += 1
        try:
            dtheta, dy = _lm_step(*blocks, mu)
        except (np.linalg.LinAlgError, ValueError):
            mu *= 10.0
            continue
        cand_field = field.with_theta(theta + dtheta)
        cand_y = y + dy
        cand = joint_loss(cand_field, x, cand_y, lam, cfg)
        if cand < loss:
            rel = (loss - cand) / max(loss, 1e-300)
            field, y, theta = cand_field, cand_y, theta + dtheta
            mu = max(mu / 3.0, 1e-15)
            history.append(cand)
            logger.debug("LM %d: loss %.6e (mu %.1e)", it, cand, mu)
            if rel < tol or cand == 0.0:
                loss = cand
                break
            loss, *blocks = _normal_equations(field, x, y, lam, cfg, chunk)
        else:
            mu *= 4.0
    return RefineResult(field, y, loss, history, mu)
