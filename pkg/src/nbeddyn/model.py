"""Augmented latent ODE model: bilinear vector field over ``X_t = [x_t, y_t]``,
joint training of parameters and latent states, initial-condition inference
for new sequences, and forecasting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import TimeSeries, atomic_write_text
from .errors import DataError, DimensionError, DivergedError, IntegrationDivergedError, SchemaError
from .numerics import (
    DIVERGENCE_LIMIT,
    Adam,
    IntegratorConfig,
    QuadraticField,
    cosine_lr_scale,
    flow_trajectory,
    pair_indices,
    rk4_step,
    sequence_objective,
)
from .refine import refine_joint

logger = logging.getLogger(__name__)

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),  # derivative in terms of the activation output
}


class BilinearODEModel(QuadraticField):
    """``f(X) = A X + B u(X) + c``, optionally followed by ``layers`` dense tanh layers.

    The first ``n_obs`` components of the state are the observed ones.
    """

    def __init__(self, n_obs, A, B=None, c=None, dense=(), activation="tanh"):
        super().__init__(A, B, c)
        self.d_E = self.dim
        self.n_obs = int(n_obs)
        if not 1 <= self.n_obs <= self.d_E:
            raise DimensionError(f"need 1 <= n_obs <= d_E, got n_obs={n_obs}, d_E={self.d_E}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.dense = [(np.array(W, dtype=float, ndmin=2), np.asarray(b, dtype=float).ravel()) for W, b in dense]
        if self.dense:
            widths = [self.d_E] + [W.shape[0] for W, _ in self.dense]
            for (W, b), w_in in zip(self.dense, widths):
                if W.shape[1] != w_in or b.size != W.shape[0]:
                    raise DimensionError("inconsistent dense layer shapes")
            if widths[-1] != self.d_E:
                raise DimensionError("last dense layer must map back to d_E")

    # -- construction ----------------------------------------------------
    @classmethod
    def zeros(cls, d_E: int, n_obs: int, quadratic: bool = True, layers: int = 0, width: int = 0):
        n_pairs = d_E * (d_E + 1) // 2
        dense = []
        if layers:
            sizes = [d_E] + [width] * layers + [d_E]
            dense = [(np.zeros((o, i)), np.zeros(o)) for i, o in zip(sizes[:-1], sizes[1:])]
        return cls(n_obs, np.zeros((d_E, d_E)), np.zeros((d_E, n_pairs)) if quadratic else None, np.zeros(d_E), dense)

    @classmethod
    def random(cls, d_E, n_obs, rng, scale=0.01, quadratic=True, layers=0, width=0):
        m = cls.zeros(d_E, n_obs, quadratic, layers, width)
        theta = scale * rng.standard_normal(m.n_params)
        if layers:
            # dense weights get fan-in scaling so the stack starts near-linear, not dead
            theta = m._init_dense(theta, rng)
        return m.with_theta(theta)

    def _init_dense(self, theta, rng):
        _, k = self._split_block(theta)
        for W, b in self.dense:
            size = W.size
            theta[k : k + size] = rng.standard_normal(size) / np.sqrt(W.shape[1])
            theta[k + size : k + size + b.size] = 0.0
            k += size + b.size
        return theta

    @property
    def architecture(self) -> dict:
        return {
            "quadratic": self.quadratic,
            "layers": max(len(self.dense) - 1, 0),
            "width": self.dense[0][0].shape[0] if self.dense else 0,
            "activation": self.activation,
        }

    def theta(self):
        parts = [self._block_theta()]
        for W, b in self.dense:
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        (A, B, c), k = self._split_block(theta)
        dense = []
        for W, b in self.dense:
            Wn = theta[k : k + W.size].reshape(W.shape)
            k += W.size
            bn = theta[k : k + b.size]
            k += b.size
            dense.append((Wn, bn))
        if k != theta.size:
            raise DimensionError(f"theta has {theta.size} entries, model expects {k}")
        return BilinearODEModel(self.n_obs, A, B, c, dense, self.activation)

    # -- evaluation --------------------------------------------------------
    def _dense_forward(self, h):
        act, _ = _ACTIVATIONS[self.activation]
        outs = []
        for i, (W, b) in enumerate(self.dense):
            z = h @ W.T + b
            h = z if i == len(self.dense) - 1 else act(z)
            outs.append(h)
        return outs

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        h = self._block(X)
        if self.dense:
            h = self._dense_forward(h)[-1]
        return h

    def jacobian(self, X):
        J = self._block_jacobian(X)
        if not self.dense:
            return J
        _, dact = _ACTIVATIONS[self.activation]
        outs = self._dense_forward(self._block(np.asarray(X, dtype=float)))
        for i, (W, _) in enumerate(self.dense):
            J = W @ J
            if i < len(self.dense) - 1:
                J = dact(outs[i])[..., :, None] * J
        return J

    def param_jacobian(self, X):
        if self.dense:
            raise NotImplementedError("parameter Jacobian is only available without dense layers")
        return self._block_param_jacobian(X)

    def vjp(self, X, g):
        if not self.dense:
            return self._block_vjp(X, g)
        _, dact = _ACTIVATIONS[self.activation]
        h0 = self._block(X)
        outs = self._dense_forward(h0)
        inputs = [h0] + outs[:-1]
        dense_grads = []
        for i in reversed(range(len(self.dense))):
            W, _ = self.dense[i]
            if i < len(self.dense) - 1:
                g = g * dact(outs[i])
            dense_grads.append(np.concatenate([(g.T @ inputs[i]).ravel(), g.sum(axis=0)]))
            g = g @ W
        gX, gblock = self._block_vjp(X, g)
        return gX, np.concatenate([gblock] + dense_grads[::-1])


def eval_field(model: BilinearODEModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != model.d_E:
        raise DimensionError(f"state has dimension {X.shape[-1]}, model expects {model.d_E}")
    return model(X)


def lorenz_as_bilinear(sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> BilinearODEModel:
    """Exact Lorenz-63 right-hand side written in the bilinear parametrisation."""
    A = np.array([[-sigma, sigma, 0.0], [rho, -1.0, 0.0], [0.0, 0.0, -beta]])
    I, J = pair_indices(3)
    B = np.zeros((3, I.size))
    pair = {(int(i), int(j)): p for p, (i, j) in enumerate(zip(I, J))}
    B[1, pair[(0, 2)]] = -1.0
    B[2, pair[(0, 1)]] = 1.0
    return BilinearODEModel(1, A, B, np.zeros(3))


@dataclass
class LatentTrajectory:
    """Observed rows ``x`` (fixed) and latent rows ``y``; ``X_t = [x_t, y_t]``."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float)
        if self.x.shape[0] == 0:
            self.y = y.reshape(0, y.shape[-1] if y.ndim == 2 else 0)
        else:
            self.y = y.reshape(self.x.shape[0], -1)

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.x, self.y])


def init_latent(T: int, dim: int, scale: float, seed: int) -> np.ndarray:
    if T < 1 or dim < 0:
        raise ValueError("T must be positive and dim non-negative")
    if scale == 0:
        return np.zeros((T, dim))
    return scale * np.random.default_rng(seed).standard_normal((T, dim))


@dataclass
class TrainConfig:
    lam: float = 1.0
    epochs: int = 5000
    lr_theta: float = 1e-3
    lr_latent: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_final_fraction: float = 1.0
    seed: int = 0
    latent_init_scale: float = 0.1
    theta_init_scale: float = 0.01
    substeps: int = 1
    quadratic: bool = True
    layers: int = 0
    width: int = 0
    mode: str = "joint"  # or "alternating"
    alternate_every: int = 100
    refine_iterations: int = 0  # Levenberg-Marquardt steps after Adam (quadratic fields only)
    refine_damping: float = 1e-3
    divergence_limit: float = DIVERGENCE_LIMIT

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.mode not in ("joint", "alternating"):
            raise ValueError(f"mode must be 'joint' or 'alternating', got {self.mode!r}")
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be >= 0")
        if self.refine_iterations and self.layers:
            raise ValueError("refinement needs a pure bilinear field (layers=0)")


@dataclass
class TrainState:
    """Everything needed to continue an interrupted run bit-for-bit."""

    iteration: int
    z: np.ndarray
    adam: list[dict]
    best_z: np.ndarray
    best_loss: float
    history: list[float]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "z": self.z.tolist(),
            "adam": self.adam,
            "best_z": self.best_z.tolist(),
            "best_loss": self.best_loss,
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        return cls(
            int(d["iteration"]),
            np.asarray(d["z"], dtype=float),
            list(d["adam"]),
            np.asarray(d["best_z"], dtype=float),
            float(d["best_loss"]),
            [float(v) for v in d["history"]],
        )


@dataclass
class TrainedModel:
    model: BilinearODEModel
    train_latents: LatentTrajectory
    loss_history: np.ndarray
    config: TrainConfig
    dt: float

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.dt, self.config.substeps)

    @property
    def n_obs(self) -> int:
        return self.model.n_obs

    def one_step_predictions(self) -> np.ndarray:
        """``G(Phi(X_{t-1}))`` for every training step ``t >= 1``."""
        return rk4_step(self.model, self.train_latents.X[:-1], self.integrator)[:, : self.n_obs]

    def loss(self) -> float:
        """Training objective at the stored parameters and latents."""
        X = self.train_latents.X
        return sequence_objective(self.model, X, self.train_latents.x, self.config.lam, self.integrator, need_theta=False).loss

    def one_step_rmse(self) -> float:
        err = self.train_latents.x[1:] - self.one_step_predictions()
        return float(np.sqrt(np.mean(err**2)))


def _latent_lr(cfg: TrainConfig, p: int, size: int) -> np.ndarray:
    lr = np.full(size, cfg.lr_latent)
    lr[:p] = cfg.lr_theta
    return lr


def train(
    observations: TimeSeries,
    d_E: int,
    cfg: TrainConfig,
    callback: Callable[[TrainState, "TrainedModel"], None] | None = None,
    callback_every: int = 0,
    resume: TrainState | None = None,
    init_model: BilinearODEModel | None = None,
    init_latents: np.ndarray | None = None,
) -> TrainedModel:
    """Jointly fit the field parameters and the latent states of ``observations``.

    Minimises ``sum_t |x_t - G(Phi(X_{t-1}))|^2 + lam |X_t - Phi(X_{t-1})|^2``
    with full-batch Adam over ``(theta, y)``. The returned model is the
    lowest-loss iterate. ``d_E == n`` is accepted and reduces to plain
    identification of a fully observed field.
    """
    x = observations.values
    T, n = x.shape
    if d_E < n:
        raise DimensionError(f"d_E={d_E} must be >= observed dimension {n}")
    if T < 3:
        raise DataError("need at least 3 samples to train")
    m = d_E - n
    icfg = IntegratorConfig(observations.dt, cfg.substeps)
    rng = np.random.default_rng(cfg.seed)
    if init_model is None:
        template = BilinearODEModel.random(d_E, n, rng, cfg.theta_init_scale, cfg.quadratic, cfg.layers, cfg.width)
    else:
        template = init_model
    theta0 = template.theta()
    p = theta0.size
    if init_latents is None:
        y0 = init_latent(T, m, cfg.latent_init_scale, cfg.seed + 1)
    else:
        y0 = np.asarray(init_latents, dtype=float).reshape(T, m)

    size = p + T * m
    lr = _latent_lr(cfg, p, size)
    if cfg.mode == "joint":
        opts = [Adam(size, lr, cfg.beta1, cfg.beta2, cfg.eps)]
    else:
        opts = [Adam(p, lr[:p], cfg.beta1, cfg.beta2, cfg.eps), Adam(size - p, lr[p:], cfg.beta1, cfg.beta2, cfg.eps)]

    if resume is None:
        state = TrainState(0, np.concatenate([theta0, y0.ravel()]), [], None, math.inf, [])
    else:
        state = resume
        if state.z.size != size:
            raise DimensionError("checkpoint does not match data / architecture")
        for opt, sd in zip(opts, state.adam):
            opt.load_state_dict(sd)

    def unpack(z):
        return template.with_theta(z[:p]), z[p:].reshape(T, m)

    def snapshot(z) -> TrainedModel:
        model, y = unpack(z)
        return TrainedModel(model, LatentTrajectory(x.copy(), y.copy()), np.asarray(state.history), cfg, observations.dt)

    z = state.z
    for k in range(state.iteration, cfg.epochs):
        model, y = unpack(z)
        try:
            val = sequence_objective(model, np.hstack([x, y]), x, cfg.lam, icfg)
        except (IntegrationDivergedError, DivergedError) as exc:
            raise DivergedError(f"training diverged: {exc}", k) from exc
        if val.loss > cfg.divergence_limit:
            raise DivergedError(f"training loss {val.loss:.3e} exceeded guard", k)
        state.history.append(val.loss)
        if val.loss < state.best_loss:
            state.best_loss = val.loss
            state.best_z = z.copy()
        g = np.concatenate([val.grad_theta, val.grad_X[:, n:].ravel()])
        scale = cosine_lr_scale(k, cfg.epochs, cfg.lr_final_fraction)
        if cfg.mode == "joint":
            z = opts[0].step(z, g, scale)
        elif (k // cfg.alternate_every) % 2 == 0:
            z = np.concatenate([z[:p], opts[1].step(z[p:], g[p:], scale)])
        else:
            z = np.concatenate([opts[0].step(z[:p], g[:p], scale), z[p:]])
        state.z = z
        state.iteration = k + 1
        if callback is not None and callback_every and state.iteration % callback_every == 0:
            state.adam = [o.state_dict() for o in opts]
            callback(state, snapshot(state.best_z))

    # the final iterate has not been scored yet
    model, y = unpack(z)
    try:
        final = sequence_objective(model, np.hstack([x, y]), x, cfg.lam, icfg, need_theta=False).loss
    except (IntegrationDivergedError, DivergedError):
        final = math.inf
    if math.isfinite(final):
        state.history.append(final)
    if final < state.best_loss:
        state.best_loss, state.best_z = final, z.copy()
    state.adam = [o.state_dict() for o in opts]
    if cfg.refine_iterations and math.isfinite(state.best_loss):
        model, y = unpack(state.best_z)
        ref = refine_joint(model, x, y, cfg.lam, icfg, cfg.refine_iterations, cfg.refine_damping)
        state.history.extend(ref.history[1:])
        if ref.loss < state.best_loss:
            state.best_loss = ref.loss
            state.best_z = np.concatenate([ref.field.theta(), ref.y.ravel()])
    result = snapshot(state.best_z)
    logger.info("training done: best loss %.6e, one-step RMSE %.3e", state.best_loss, result.one_step_rmse())
    return result


# ---------------------------------------------------------------------------
# Initial-condition inference and forecasting


@dataclass
class InferConfig:
    lam: float | None = None  # None: reuse the training value
    iterations: int = 2000
    lr: float = 1e-2
    lr_final_fraction: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: str = "nearest"  # or "random"
    random_scale: float | None = None
    seed: int = 0
    target_index: int = -1  # row of the window whose state is returned

    def __post_init__(self):
        if self.init not in ("nearest", "random"):
            raise ValueError(f"init must be 'nearest' or 'random', got {self.init!r}")


@dataclass
class InferenceResult:
    X_T: np.ndarray  # state at target_index (batch: K x d_E)
    X: np.ndarray  # full inferred window(s)
    loss: np.ndarray  # final objective per window
    init_loss: np.ndarray
    init_offset: np.ndarray | None  # nearest-training offsets when used


def nearest_training_offsets(train_x: np.ndarray, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each window (``K x W x n``) find the training offset with minimal squared L2 distance.

    Ties resolve to the smallest offset.
    """
    train_x = np.asarray(train_x, dtype=float)
    windows = np.asarray(windows, dtype=float)
    W = windows.shape[1]
    if W > train_x.shape[0]:
        raise DataError(f"window of length {W} longer than training data ({train_x.shape[0]})")
    views = np.lib.stride_tricks.sliding_window_view(train_x, W, axis=0)  # O x n x W
    flat = views.transpose(0, 2, 1).reshape(views.shape[0], -1)
    q = windows.reshape(windows.shape[0], -1)
    sq_train = np.einsum("ij,ij->i", flat, flat)
    offsets = np.empty(len(q), dtype=int)
    dists = np.empty(len(q))
    for i, row in enumerate(q):
        d2 = sq_train - 2.0 * flat @ row + row @ row
        # refine the near-minimal candidates exactly; the expansion above loses digits
        cand = np.nonzero(d2 <= d2.min() + 1e-9 * (1.0 + abs(d2.min())) + 1e-9 * (row @ row))[0]
        exact = np.sum((flat[cand] - row) ** 2, axis=1)
        j = int(np.argmin(exact))
        offsets[i] = cand[j]
        dists[i] = exact[j]
    return offsets, np.sqrt(dists)


def nearest_training_init(trained: TrainedModel, new_obs) -> np.ndarray:
    """Latent rows of the training window whose observations best match ``new_obs``."""
    values = new_obs.values if isinstance(new_obs, TimeSeries) else np.asarray(new_obs, dtype=float)
    off, _ = nearest_training_offsets(trained.train_latents.x, values[None])
    W = values.shape[0]
    return trained.train_latents.y[off[0] : off[0] + W].copy()


def infer_initial_conditions(
    trained: TrainedModel,
    windows: np.ndarray,
    cfg: InferConfig | None = None,
    mask: np.ndarray | None = None,
) -> InferenceResult:
    """Fit latent states (and masked observations) of ``K`` windows with theta frozen.

    ``windows`` is ``K x W x n``. Windows are independent, so one Adam run over
    the stacked free variables is equivalent to ``K`` separate runs; the
    lowest-objective iterate is kept per window.
    """
    cfg = cfg or InferConfig()
    windows = np.asarray(windows, dtype=float)
    if windows.ndim == 2:
        windows = windows[None]
    K, W, n = windows.shape
    model = trained.model
    if n != model.n_obs:
        raise DimensionError(f"windows have {n} observed components, model expects {model.n_obs}")
    if W < 2:
        raise DataError("inference window needs at least 2 samples")
    if mask is None:
        mask = np.ones_like(windows, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape((-1, W, n)), windows.shape)
    if not np.any(mask[:, 1:], axis=(1, 2)).all():
        raise DataError("observation mask leaves nothing to fit in at least one window")
    lam = trained.config.lam if cfg.lam is None else cfg.lam
    icfg = trained.integrator
    d = model.d_E
    m = d - n

    offsets = None
    if cfg.init == "nearest" and m > 0:
        # masked entries are excluded from the matching by filling with the window mean
        fill = np.where(mask, windows, (windows * mask).sum(axis=1, keepdims=True) / np.maximum(mask.sum(axis=1, keepdims=True), 1))
        offsets, _ = nearest_training_offsets(trained.train_latents.x, fill)
        idx = offsets[:, None] + np.arange(W)
        y0 = trained.train_latents.y[idx]
        x_fill = np.where(mask, windows, trained.train_latents.x[idx])
    else:
        scale = cfg.random_scale if cfg.random_scale is not None else trained.config.latent_init_scale
        y0 = scale * np.random.default_rng(cfg.seed).standard_normal((K, W, m))
        x_fill = np.where(mask, windows, 0.0)
    X = np.concatenate([x_fill, y0], axis=-1)

    free = np.zeros((K, W, d), dtype=bool)
    free[..., n:] = True
    free[..., :n] = ~mask
    opt = Adam(int(free.sum()), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    theta_before = model.theta()
    best_X = X.copy()
    best = np.full(K, math.inf)
    init_loss = None
    for k in range(cfg.iterations + 1):
        val = sequence_objective(model, X, windows, lam, icfg, obs_mask=mask, need_theta=False)
        seq = val.seq_loss
        if init_loss is None:
            init_loss = seq.copy()
        improved = seq < best
        best[improved] = seq[improved]
        best_X[improved] = X[improved]
        if k == cfg.iterations:
            break
        X = X.copy()
        X[free] = opt.step(X[free], val.grad_X[free], cosine_lr_scale(k, cfg.iterations, cfg.lr_final_fraction))
        if not np.all(np.isfinite(X)):
            raise DivergedError("latent inference diverged", k)
    assert np.array_equal(theta_before, model.theta())
    t = cfg.target_index
    return InferenceResult(best_X[:, t, :], best_X, best, init_loss, offsets)


def infer_initial_condition(
    trained: TrainedModel,
    new_obs,
    cfg: InferConfig | None = None,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-window inference; returns ``(X_T, inferred window states)``."""
    values = new_obs.values if isinstance(new_obs, TimeSeries) else np.asarray(new_obs, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if len(values) == 0:
        raise DataError("empty observation window")
    res = infer_initial_conditions(trained, values[None], cfg, None if mask is None else np.asarray(mask)[None])
    return res.X_T[0], res.X[0]


def forecast_states(trained: TrainedModel, X_T: np.ndarray, horizon: int) -> np.ndarray:
    """Augmented states for ``horizon`` intervals after ``X_T`` (row 0 is the first forecast)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return flow_trajectory(trained.model, np.asarray(X_T, dtype=float), trained.integrator, horizon)[1:]


def forecast(trained: TrainedModel, X_T: np.ndarray, horizon: int, start_time: float = 0.0) -> TimeSeries:
    """Observed components ``G(X_t)`` of the integrated trajectory from ``X_T``."""
    states = forecast_states(trained, X_T, horizon)
    return TimeSeries(states[..., : trained.n_obs], trained.dt, start_time + trained.dt)


# ---------------------------------------------------------------------------
# Persistence

MODEL_SCHEMA = "nbeddyn-model"
MODEL_SCHEMA_VERSION = 1


def model_to_dict(trained: TrainedModel) -> dict:
    m = trained.model
    return {
        "schema": MODEL_SCHEMA,
        "schema_version": MODEL_SCHEMA_VERSION,
        "d_E": m.d_E,
        "n_obs": m.n_obs,
        "dt": trained.dt,
        "architecture": m.architecture,
        "theta": m.theta().tolist(),
        "train_config": asdict(trained.config),
        "loss_history": [float(v) for v in trained.loss_history],
        "train_latents": {"x": trained.train_latents.x.tolist(), "y": trained.train_latents.y.tolist()},
    }


def model_from_dict(doc: dict, require_latents: bool = False) -> TrainedModel:
    if not isinstance(doc, dict) or doc.get("schema") != MODEL_SCHEMA:
        raise SchemaError("not an nbeddyn model document")
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise SchemaError(f"unsupported model schema version {doc.get('schema_version')!r}")
    try:
        arch = doc["architecture"]
        d_E, n_obs = int(doc["d_E"]), int(doc["n_obs"])
        template = BilinearODEModel.zeros(d_E, n_obs, bool(arch["quadratic"]), int(arch["layers"]), int(arch["width"]))
        template.activation = arch.get("activation", "tanh")
        model = template.with_theta(np.asarray(doc["theta"], dtype=float))
        known = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in doc.get("train_config", {}).items() if k in known})
        lat = doc.get("train_latents")
        if lat is None or not lat.get("x"):
            if require_latents:
                raise SchemaError("model document has no training latent trajectory")
            latents = LatentTrajectory(np.zeros((0, n_obs)), np.zeros((0, d_E - n_obs)))
        else:
            latents = LatentTrajectory(np.asarray(lat["x"], dtype=float), np.asarray(lat["y"], dtype=float).reshape(len(lat["x"]), d_E - n_obs))
        return TrainedModel(model, latents, np.asarray(doc.get("loss_history", []), dtype=float), cfg, float(doc["dt"]))
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from exc


def save_model(trained: TrainedModel, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(trained), indent=1) + "\n")


def load_model(path: str | Path, require_latents: bool = False) -> TrainedModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc, require_latents)
