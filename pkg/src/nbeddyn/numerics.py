"""Numerical kernels: RK4 flow maps, exact reverse-mode gradients of the
joint latent objective, Jacobians, Adam and finite-difference checks.

Everything works in float64. Fields accept a single state ``(d,)`` or a batch
``(N, d)``; batched evaluation is how whole sequences are integrated in one
pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, DivergedError, IntegrationDivergedError

DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    substeps: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {self.substeps}")

    @property
    def h(self) -> float:
        return self.dt / self.substeps


@dataclass
class GradientResult:
    loss: float
    grad_theta: np.ndarray
    grad_latent: np.ndarray


class VectorField:
    """Parametric autonomous vector field ``f_theta: R^d -> R^d``.

    Subclasses implement ``__call__``, ``jacobian``, ``vjp`` and the
    ``theta``/``with_theta`` pair for a flat parameter vector.
    """

    dim: int

    @property
    def n_params(self) -> int:
        return self.theta().size

    def theta(self) -> np.ndarray:
        raise NotImplementedError

    def with_theta(self, theta: np.ndarray) -> "VectorField":
        raise NotImplementedError

    def __call__(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, X: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(g @ df/dX, sum over batch of g @ df/dtheta)`` for ``X, g`` of shape ``(N, d)``."""
        raise NotImplementedError

    def param_jacobian(self, X: np.ndarray) -> np.ndarray:
        """``df/dtheta`` per state, shape ``(N, d, n_params)``."""
        raise NotImplementedError(f"{type(self).__name__} has no parameter Jacobian")


def _affine_param_jacobian(X: np.ndarray, features: list[np.ndarray]) -> np.ndarray:
    """``df/dtheta`` for ``f = sum_k M_k phi_k(X) + c`` with theta = ``[vec(M_1), ..., c]`` (row-major)."""
    N = X.shape[0]
    d = X.shape[1]
    eye = np.eye(d)
    blocks = [np.einsum("ik,nj->nikj", eye, F).reshape(N, d, d * F.shape[1]) for F in features]
    blocks.append(np.broadcast_to(eye, (N, d, d)))
    return np.concatenate(blocks, axis=2)


class LinearField(VectorField):
    """``f(X) = A X + b``."""

    def __init__(self, A, b=None):
        self.A = np.array(A, dtype=float, ndmin=2)
        if self.A.shape[0] != self.A.shape[1]:
            raise DimensionError(f"A must be square, got {self.A.shape}")
        self.dim = self.A.shape[0]
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float).reshape(self.dim)

    def theta(self):
        return np.concatenate([self.A.ravel(), self.b])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = self.dim
        return LinearField(theta[: d * d].reshape(d, d), theta[d * d :])

    def __call__(self, X):
        return X @ self.A.T + self.b

    def jacobian(self, X):
        X = np.asarray(X)
        return np.broadcast_to(self.A, X.shape[:-1] + self.A.shape).copy()

    def vjp(self, X, g):
        return g @ self.A, np.concatenate([(g.T @ X).ravel(), g.sum(axis=0)])

    def param_jacobian(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _affine_param_jacobian(X, [X])


def pair_indices(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(I, J)`` of all unordered pairs ``i <= j`` in row-major order."""
    I, J = np.triu_indices(d)
    return I, J


def quadratic_features(X: np.ndarray, I: np.ndarray, J: np.ndarray) -> np.ndarray:
    return X[..., I] * X[..., J]


class QuadraticField(VectorField):
    """``f(X) = A X + B u(X) + c`` with ``u(X) = [X_i X_j]_{i<=j}``.

    ``B=None`` gives a purely affine field whose parameter vector omits B.
    """

    def __init__(self, A, B=None, c=None):
        self.A = np.array(A, dtype=float, ndmin=2)
        d = self.A.shape[0]
        if self.A.shape != (d, d):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        self.dim = d
        self._I, self._J = pair_indices(d)
        n_pairs = self._I.size
        if B is not None:
            B = np.array(B, dtype=float, ndmin=2)
            if B.shape != (d, n_pairs):
                raise DimensionError(f"B must have shape {(d, n_pairs)}, got {B.shape}")
        self.B = B
        self.c = np.zeros(d) if c is None else np.asarray(c, dtype=float).reshape(d)
        # one-hot scatter matrices for the quadratic VJP
        self._EI = np.zeros((n_pairs, d))
        self._EI[np.arange(n_pairs), self._I] = 1.0
        self._EJ = np.zeros((n_pairs, d))
        self._EJ[np.arange(n_pairs), self._J] = 1.0

    @property
    def quadratic(self) -> bool:
        return self.B is not None

    def _block_theta(self):
        parts = [self.A.ravel()]
        if self.B is not None:
            parts.append(self.B.ravel())
        parts.append(self.c)
        return np.concatenate(parts)

    def _split_block(self, theta):
        d = self.dim
        k = d * d
        A = theta[:k].reshape(d, d)
        B = None
        if self.B is not None:
            nb = d * self._I.size
            B = theta[k : k + nb].reshape(d, self._I.size)
            k += nb
        c = theta[k : k + d]
        return (A, B, c), k + d

    def theta(self):
        return self._block_theta()

    def with_theta(self, theta):
        (A, B, c), _ = self._split_block(np.asarray(theta, dtype=float))
        return QuadraticField(A, B, c)

    def _block(self, X):
        out = X @ self.A.T + self.c
        if self.B is not None:
            out = out + quadratic_features(X, self._I, self._J) @ self.B.T
        return out

    def _block_jacobian(self, X):
        X = np.asarray(X, dtype=float)
        Jac = np.broadcast_to(self.A, X.shape[:-1] + self.A.shape).copy()
        if self.B is not None:
            # d u_p / d X_k = delta_{I_p k} X_{J_p} + delta_{J_p k} X_{I_p}
            du = X[..., self._J, None] * self._EI + X[..., self._I, None] * self._EJ
            Jac += self.B @ du
        return Jac

    def _block_vjp(self, X, g):
        gX = g @ self.A
        parts = [(g.T @ X).ravel()]
        if self.B is not None:
            U = quadratic_features(X, self._I, self._J)
            gU = g @ self.B
            gX = gX + (gU * X[:, self._J]) @ self._EI + (gU * X[:, self._I]) @ self._EJ
            parts.append((g.T @ U).ravel())
        parts.append(g.sum(axis=0))
        return gX, np.concatenate(parts)

    def _block_param_jacobian(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        feats = [X]
        if self.B is not None:
            feats.append(quadratic_features(X, self._I, self._J))
        return _affine_param_jacobian(X, feats)

    def __call__(self, X):
        return self._block(np.asarray(X, dtype=float))

    def jacobian(self, X):
        return self._block_jacobian(X)

    def param_jacobian(self, X):
        return self._block_param_jacobian(X)

    def vjp(self, X, g):
        return self._block_vjp(X, g)


# ---------------------------------------------------------------------------
# RK4


def _check_state(field: VectorField, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != field.dim:
        raise DimensionError(f"state dimension {X.shape[-1]} does not match field dimension {field.dim}")
    return X


def _rk4_substep(field, X, h):
    k1 = field(X)
    k2 = field(X + 0.5 * h * k1)
    k3 = field(X + 0.5 * h * k2)
    k4 = field(X + h * k3)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_tangents(field: VectorField, X: np.ndarray, cfg: IntegratorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flow map of a batch ``(N, d)`` with its exact Jacobians (forward mode).

    Returns ``(Y, dY/dX (N, d, d), dY/dtheta (N, d, p))``.
    """
    X = np.atleast_2d(_check_state(field, X))
    N, d = X.shape
    h = cfg.h
    # tangent columns: d for the state, then p for the parameters
    Z = X.copy()
    dZ = np.concatenate([np.broadcast_to(np.eye(d), (N, d, d)), np.zeros((N, d, field.n_params))], axis=2)

    def stage(S, dS):
        k = field(S)
        dk = field.jacobian(S) @ dS
        dk[:, :, d:] += field.param_jacobian(S)
        return k, dk

    for _ in range(cfg.substeps):
        k1, d1 = stage(Z, dZ)
        k2, d2 = stage(Z + 0.5 * h * k1, dZ + 0.5 * h * d1)
        k3, d3 = stage(Z + 0.5 * h * k2, dZ + 0.5 * h * d2)
        k4, d4 = stage(Z + h * k3, dZ + h * d3)
        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        dZ = dZ + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    return Z, dZ[:, :, :d], dZ[:, :, d:]


def rk4_step(field: VectorField, X: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
    """Advance ``X`` by one sampling interval ``cfg.dt`` using ``cfg.substeps`` classical RK4 steps."""
    X = _check_state(field, X)
    h = cfg.h
    for k in range(cfg.substeps):
        with np.errstate(over="ignore", invalid="ignore"):
            X = _rk4_substep(field, X, h)
        if not np.all(np.isfinite(X)):
            raise IntegrationDivergedError("RK4 integration produced non-finite state", k)
    return X


def flow_trajectory(field: VectorField, X0: np.ndarray, cfg: IntegratorConfig, steps: int) -> np.ndarray:
    """Iterate the flow map; row ``k`` is the state after ``k`` sampling intervals."""
    X0 = _check_state(field, X0)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    out = np.empty((steps + 1,) + X0.shape)
    out[0] = X0
    X = X0
    h = cfg.h
    for k in range(steps):
        # overflow is reported below as a divergence, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.substeps):
                X = _rk4_substep(field, X, h)
        if not np.all(np.isfinite(X)):
            raise IntegrationDivergedError("trajectory diverged", k + 1)
        out[k + 1] = X
    return out


def _rk4_forward_tape(field, X, cfg):
    h = cfg.h
    tape = []
    for _ in range(cfg.substeps):
        k1 = field(X)
        s2 = X + 0.5 * h * k1
        k2 = field(s2)
        s3 = X + 0.5 * h * k2
        k3 = field(s3)
        s4 = X + h * k3
        k4 = field(s4)
        tape.append((X, s2, s3, s4))
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X, tape


def _rk4_backward(field, tape, gY, h, need_theta=True):
    gtheta = 0.0
    for s1, s2, s3, s4 in reversed(tape):
        gX = gY.copy()
        gk4 = (h / 6.0) * gY
        gs4, gt = field.vjp(s4, gk4)
        gX += gs4
        gtheta = gtheta + gt if need_theta else gtheta
        gk3 = (h / 3.0) * gY + h * gs4
        gs3, gt = field.vjp(s3, gk3)
        gX += gs3
        gtheta = gtheta + gt if need_theta else gtheta
        gk2 = (h / 3.0) * gY + 0.5 * h * gs3
        gs2, gt = field.vjp(s2, gk2)
        gX += gs2
        gtheta = gtheta + gt if need_theta else gtheta
        gk1 = (h / 6.0) * gY + 0.5 * h * gs2
        gs1, gt = field.vjp(s1, gk1)
        gX += gs1
        gtheta = gtheta + gt if need_theta else gtheta
        gY = gX
    if not need_theta or np.isscalar(gtheta):
        gtheta = np.zeros(field.n_params) if need_theta else None
    return gY, gtheta


def rk4_step_vjp(field: VectorField, X: np.ndarray, gY: np.ndarray, cfg: IntegratorConfig):
    """Pull back a cotangent ``gY`` through one flow-map step from batch ``X``."""
    X = np.atleast_2d(_check_state(field, X))
    _, tape = _rk4_forward_tape(field, X, cfg)
    return _rk4_backward(field, tape, np.atleast_2d(gY), cfg.h)


# ---------------------------------------------------------------------------
# Joint objective


@dataclass
class ObjectiveValue:
    loss: float
    seq_loss: np.ndarray  # one entry per leading batch index
    grad_X: np.ndarray
    grad_theta: np.ndarray | None
    prediction: np.ndarray = field(repr=False)


def sequence_objective(
    field: VectorField,
    X: np.ndarray,
    obs: np.ndarray,
    lam: float,
    cfg: IntegratorConfig,
    obs_mask: np.ndarray | None = None,
    need_theta: bool = True,
) -> ObjectiveValue:
    """Data-fit plus dynamical-consistency objective over augmented trajectories.

    ``X`` has shape ``(..., T, d)`` and ``obs`` shape ``(..., T, n)``. For each
    sequence the value is::

        sum_{t>=1} |m_t * (obs_t - P_t[:n])|^2 + lam * |X_t - P_t|^2,   P_t = Phi(X_{t-1})

    The gradient is taken with respect to every entry of ``X`` (both as
    integration input and as regression target) and, optionally, theta.
    """
    X = np.asarray(X, dtype=float)
    obs = np.asarray(obs, dtype=float)
    d = field.dim
    if X.shape[-1] != d:
        raise DimensionError(f"augmented dimension {X.shape[-1]} != field dimension {d}")
    n = obs.shape[-1]
    if obs.shape[:-1] != X.shape[:-1] or n > d:
        raise DimensionError(f"observations {obs.shape} incompatible with states {X.shape}")
    T = X.shape[-2]
    if T < 2:
        raise DimensionError("need at least two time steps")
    batch_shape = X.shape[:-2]

    inputs = X[..., :-1, :].reshape(-1, d)
    P, tape = _rk4_forward_tape(field, inputs, cfg)
    if not np.all(np.isfinite(P)):
        raise IntegrationDivergedError("flow map produced non-finite states", int(np.argmax(~np.isfinite(P).all(axis=1))))
    P = P.reshape(batch_shape + (T - 1, d))

    r_obs = obs[..., 1:, :] - P[..., :n]
    if obs_mask is not None:
        r_obs = r_obs * np.asarray(obs_mask, dtype=float)[..., 1:, :]
    r_aug = X[..., 1:, :] - P
    seq_loss = np.sum(r_obs**2, axis=(-2, -1)) + lam * np.sum(r_aug**2, axis=(-2, -1))
    loss = float(np.sum(seq_loss))
    if not math.isfinite(loss):
        raise DivergedError("objective is not finite")

    gP = -2.0 * lam * r_aug
    gP[..., :n] -= 2.0 * r_obs
    g_in, g_theta = _rk4_backward(field, tape, gP.reshape(-1, d), cfg.h, need_theta)

    gX = np.zeros_like(X)
    gX[..., :-1, :] += g_in.reshape(batch_shape + (T - 1, d))
    gX[..., 1:, :] += 2.0 * lam * r_aug
    return ObjectiveValue(loss, np.asarray(seq_loss), gX, g_theta, P)


def loss_and_gradients(
    field: VectorField,
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    cfg: IntegratorConfig,
) -> GradientResult:
    """Joint loss of one observed sequence ``x`` (T x n) with latents ``y`` (T x m)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if x.shape[0] < 2:
        raise DimensionError("need T >= 2")
    if y.shape[1] < 1 or x.shape[1] + y.shape[1] != field.dim:
        raise DimensionError(
            f"observed ({x.shape[1]}) + latent ({y.shape[1]}) dims must equal field dim {field.dim} with latent >= 1"
        )
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n = x.shape[1]
    val = sequence_objective(field, np.hstack([x, y]), x, lam, cfg)
    return GradientResult(val.loss, val.grad_theta, val.grad_X[:, n:])


def jacobian_at(field: VectorField, X: np.ndarray) -> np.ndarray:
    X = _check_state(field, X)
    return field.jacobian(X)


# ---------------------------------------------------------------------------
# Finite differences


def central_difference_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fun(x)
        flat[i] = old - h
        fm = fun(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], X: np.ndarray, h: float = 1e-6) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    cols = []
    for k in range(X.size):
        e = np.zeros_like(X)
        e[k] = h
        cols.append((f(X + e) - f(X - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Componentwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Adam with per-coordinate step sizes (``lr`` may be an array)."""

    def __init__(self, size: int, lr=1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = np.broadcast_to(np.asarray(lr, dtype=float), (size,)).copy()
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray, lr_scale: float = 1.0) -> np.ndarray:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        return x - (lr_scale / bc1) * self.lr * self.m / (np.sqrt(self.v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = np.asarray(state["m"], dtype=float)
        self.v = np.asarray(state["v"], dtype=float)


def cosine_lr_scale(iteration: int, total: int, final_fraction: float) -> float:
    """Cosine decay from 1 to ``final_fraction`` over ``total`` iterations."""
    if final_fraction >= 1.0 or total <= 1:
        return 1.0
    return final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * iteration / (total - 1)))


def adam_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    lr=1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    iterations: int = 1000,
    lr_final_fraction: float = 1.0,
    max_loss: float = math.inf,
) -> tuple[np.ndarray, np.ndarray]:
    """Run Adam on ``fun`` (returning ``(loss, grad)``).

    Returns the final iterate and the loss evaluated at each iterate before
    its update.
    """
    x = np.array(x0, dtype=float)
    shape = x.shape
    x = x.ravel()
    opt = Adam(x.size, lr, beta1, beta2, eps)
    history = np.empty(iterations)
    for k in range(iterations):
        loss, g = fun(x.reshape(shape))
        if not math.isfinite(loss) or loss > max_loss:
            raise DivergedError(f"loss became {loss}", k)
        history[k] = loss
        x = opt.step(x, np.asarray(g, dtype=float).ravel(), cosine_lr_scale(k, iterations, lr_final_fraction))
    return x.reshape(shape), history
