"""Command-line front end: ``nbeddyn <command> [--config C] [--seed S] [--out D] [--quiet]``.

Every command writes into ``<out>/<name>/{data,models,reports,figures}``.
Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 divergence,
4 training finished above the configured RMSE gate.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .baselines import AnalogForecaster, SparseForecaster, write_sparse_model
from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import (
    ObservationOperator,
    PCAReduction,
    TimeSeries,
    add_observation_noise,
    atomic_write_text,
    observe,
    pca_fit,
    read_series_csv,
    simulate_linear_complex,
    simulate_lorenz63,
    simulate_two_mode_field,
    write_csv_rows,
    write_series_csv,
)
from .embedding import embedding_dim_fnn, lag_by_autocorrelation, lag_by_mutual_information
from .errors import DataError, DimensionError, DivergedError, IntegrationDivergedError, SchemaError
from .evaluation import forecast_rmse, jacobian_spectrum, make_test_windows, rosenstein
from .model import (
    InferConfig,
    TrainConfig,
    TrainedModel,
    TrainState,
    forecast,
    forecast_states,
    infer_initial_condition,
    infer_initial_conditions,
    load_model,
    save_model,
    train,
)

logger = logging.getLogger("nbeddyn")

DIVERGED = "DIVERGED"
EXIT_OK, EXIT_IO, EXIT_INPUT, EXIT_DIVERGED, EXIT_GATE = 0, 1, 2, 3, 4


class Console:
    """Serialized progress output; ``quiet`` silences progress but keeps results."""

    def __init__(self, quiet: bool = False):
        self.quiet = quiet

    def progress(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)

    def result(self, msg: str) -> None:
        print(msg, flush=True)


@dataclass
class RunLayout:
    root: Path

    def dir(self, kind: str) -> Path:
        path = self.root / kind
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def data(self) -> Path:
        return self.dir("data")

    @property
    def models(self) -> Path:
        return self.dir("models")

    @property
    def reports(self) -> Path:
        return self.dir("reports")

    @property
    def figures(self) -> Path:
        return self.dir("figures")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    truth: TimeSeries
    observed: TimeSeries
    test_truth: TimeSeries
    test_observed: TimeSeries
    pca: PCAReduction | None = None


def _operator(cfg: ExperimentConfig) -> ObservationOperator:
    spec = cfg.dataset.observe
    if spec.kind == "select":
        return ObservationOperator.select(*spec.indices)
    if spec.kind == "real":
        return ObservationOperator.real_part()
    if spec.kind == "linear":
        if spec.matrix is None:
            raise ConfigError("dataset.observe.matrix", "required for a linear observation operator")
        return ObservationOperator.linear(spec.matrix)
    return ObservationOperator("identity")


def _observe(series: TimeSeries, op: ObservationOperator) -> TimeSeries:
    if op.kind == "identity":
        return TimeSeries(series.values.copy(), series.dt, series.start_time)
    return observe(series, op)


def _complex(values: list[float]) -> complex:
    return complex(values[0], values[1] if len(values) > 1 else 0.0)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    steps, test_steps = ds.length - 1, ds.test_length - 1
    pca = None
    if ds.system == "lorenz63":
        if len(ds.initial_state) != 3 or len(ds.test_initial_state) != 3:
            raise ConfigError("dataset.initial_state", "Lorenz-63 needs 3-component initial states")
        params = dict(sigma=ds.sigma, rho=ds.rho, beta=ds.beta, transient=ds.transient)
        truth = simulate_lorenz63(ds.initial_state, ds.dt, steps, **params)
        test_truth = simulate_lorenz63(ds.test_initial_state, ds.dt, test_steps, **params)
        op = _operator(cfg)
    elif ds.system == "linear_complex":
        alpha = _complex(ds.alpha)
        truth = simulate_linear_complex(alpha, _complex(ds.initial_state), ds.dt, steps)
        test_truth = simulate_linear_complex(alpha, _complex(ds.test_initial_state), ds.dt, test_steps)
        op = _operator(cfg)
    else:
        truth = simulate_two_mode_field(ds.grid, ds.dt, steps, noise=ds.noise, seed=cfg.seed)
        test_truth = simulate_two_mode_field(ds.grid, ds.dt, test_steps, noise=ds.noise, seed=cfg.seed + 1, start_time=ds.length * ds.dt)
        pca = pca_fit(truth.values, ds.n_components)
        observed = TimeSeries(pca.transform(truth.values), ds.dt, truth.start_time)
        test_observed = TimeSeries(pca.transform(test_truth.values), ds.dt, test_truth.start_time)
        return Dataset(truth, observed, test_truth, test_observed, pca)
    observed = add_observation_noise(_observe(truth, op), ds.noise, cfg.seed)
    test_observed = add_observation_noise(_observe(test_truth, op), ds.noise, cfg.seed + 1)
    return Dataset(truth, observed, test_truth, test_observed, pca)


def write_dataset(data: Dataset, layout: RunLayout) -> list[Path]:
    paths = [layout.data / name for name in ("truth.csv", "observed.csv", "test_truth.csv", "test_observed.csv")]
    for path, series in zip(paths, (data.truth, data.observed, data.test_truth, data.test_observed)):
        write_series_csv(path, series)
    if data.pca is not None:
        rows = [[k + 1, float(r)] + [float(v) for v in data.pca.components[k]] for k, r in enumerate(data.pca.explained_variance_ratio)]
        header = ["component", "explained_variance_ratio"] + [f"w{i + 1}" for i in range(data.pca.components.shape[1])]
        write_csv_rows(layout.data / "pca.csv", header, rows)
        paths.append(layout.data / "pca.csv")
    return paths


# ---------------------------------------------------------------------------
# helpers shared by commands


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    m = cfg.model
    return TrainConfig(
        lam=m.lam,
        epochs=m.epochs,
        lr_theta=m.lr_theta,
        lr_latent=m.lr_latent,
        beta1=m.beta1,
        beta2=m.beta2,
        eps=m.eps,
        lr_final_fraction=m.lr_final_fraction,
        seed=cfg.seed,
        latent_init_scale=m.latent_init_scale,
        theta_init_scale=m.theta_init_scale,
        substeps=m.substeps,
        quadratic=m.quadratic,
        layers=m.layers,
        width=m.width,
        mode=m.mode,
        alternate_every=m.alternate_every,
        refine_iterations=m.refine_steps,
        refine_damping=m.refine_damping,
    )


def infer_config(cfg: ExperimentConfig) -> InferConfig:
    i = cfg.inference
    return InferConfig(iterations=i.iterations, lr=i.lr, lr_final_fraction=i.lr_final_fraction, init=i.init, seed=cfg.seed)


def _config_digest(tcfg: TrainConfig, d_E: int, data: Dataset) -> str:
    h = hashlib.sha256(json.dumps([asdict(tcfg), d_E], sort_keys=True).encode())
    h.update(np.ascontiguousarray(data.observed.values).tobytes())
    return h.hexdigest()


def model_path(layout: RunLayout, d_E: int) -> Path:
    return layout.models / f"nbeddyn_dE{d_E}.json"


class NbedDynForecaster:
    """Forecaster adapter: infer the latent state of each history window, then integrate."""

    def __init__(self, trained: TrainedModel, icfg: InferConfig, window: int):
        self.trained = trained
        self.icfg = icfg
        self.window = window

    def __call__(self, histories: np.ndarray, horizon: int) -> np.ndarray:
        h = np.asarray(histories, dtype=float)[:, -self.window :]
        res = infer_initial_conditions(self.trained, h, self.icfg)
        states = forecast_states(self.trained, res.X_T, horizon)  # horizon x K x d
        return np.moveaxis(states, 0, 1)[..., : self.trained.n_obs]

    def generate(self, history: np.ndarray, steps: int) -> np.ndarray:
        X_T, _ = infer_initial_condition(self.trained, np.asarray(history, dtype=float)[-self.window :], self.icfg)
        return forecast_states(self.trained, X_T, steps)[:, 0]


def _fmt(v) -> str | float:
    if isinstance(v, str):
        return v
    return DIVERGED if v is None or math.isinf(v) else float(v)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    data = build_dataset(cfg)
    paths = write_dataset(data, layout)
    ds = cfg.dataset
    console.result(f"system={ds.system} dt={ds.dt} train_samples={len(data.observed)} test_samples={len(data.test_observed)}")
    console.result(f"truth columns={data.truth.n} observed columns={data.observed.n}")
    v = data.observed.values
    console.result(f"observed mean={v.mean():.6g} std={v.std():.6g} min={v.min():.6g} max={v.max():.6g}")
    if data.pca is not None:
        console.result(data.pca.report())
    plotting.line_plot(layout.figures / "observed.svg", data.observed.times, {f"x{i + 1}": v[:, i] for i in range(min(v.shape[1], 3))}, title="observations")
    for p in paths:
        console.progress(f"wrote {p}")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, data: Dataset, d_E: int, layout: RunLayout, console: Console, resume: bool) -> TrainedModel:
    tcfg = train_config(cfg)
    digest = _config_digest(tcfg, d_E, data)
    ckpt = layout.models / f"checkpoint_dE{d_E}.json"
    state = None
    if resume and ckpt.exists():
        doc = json.loads(ckpt.read_text(encoding="utf-8"))
        if doc.get("digest") != digest:
            raise SchemaError(f"{ckpt}: checkpoint was written for a different configuration")
        state = TrainState.from_dict(doc["state"])
        console.progress(f"d_E={d_E}: resuming from iteration {state.iteration}")
    every = cfg.model.snapshot_every or max(tcfg.epochs // 10, 1)

    def on_progress(st: TrainState, snap: TrainedModel) -> None:
        atomic_write_text(ckpt, json.dumps({"digest": digest, "state": st.to_dict()}) + "\n")
        console.progress(f"d_E={d_E} iteration {st.iteration}: loss {st.history[-1]:.6e} best {st.best_loss:.6e}")
        if cfg.model.snapshot_every:
            tag = f"dE{d_E}_it{st.iteration:06d}"
            X = snap.train_latents.X
            header = ["t"] + [f"X{i + 1}" for i in range(X.shape[1])]
            times = data.observed.times
            write_csv_rows(layout.models / "snapshots" / f"latent_{tag}.csv", header, [[float(times[k])] + [float(v) for v in X[k]] for k in range(len(X))])
            plotting.latent_projection_plot(layout.figures / "snapshots" / f"latent_{tag}.svg", X, title=f"iteration {st.iteration}")

    trained = train(data.observed, d_E, tcfg, callback=on_progress, callback_every=every, resume=state)
    save_model(trained, model_path(layout, d_E))
    hist = trained.loss_history
    write_csv_rows(layout.reports / f"loss_dE{d_E}.csv", ["iteration", "loss"], [[k, float(v)] for k, v in enumerate(hist)])
    plotting.line_plot(layout.figures / f"loss_dE{d_E}.svg", np.arange(len(hist)), {"loss": hist}, title=f"training loss, d_E={d_E}", xlabel="iteration", logy=True)
    plotting.latent_projection_plot(layout.figures / f"latent_dE{d_E}.svg", trained.train_latents.X, title=f"learned latent space, d_E={d_E}")
    return trained


def cmd_train(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    data = build_dataset(cfg)
    write_dataset(data, layout)
    dims = [args.d_E] if getattr(args, "d_E", None) else cfg.model.dims
    rows, gate_failed = [], False
    for d_E in dims:
        trained = _train_one(cfg, data, d_E, layout, console, args.resume)
        rmse = trained.one_step_rmse()
        final = trained.loss()
        rows.append([d_E, final, rmse])
        console.result(f"d_E={d_E}: final loss {final:.6e}, one-step training RMSE {rmse:.6e}")
        if cfg.model.rmse_gate is not None and not rmse <= cfg.model.rmse_gate:
            console.result(f"d_E={d_E}: one-step RMSE {rmse:.3e} above gate {cfg.model.rmse_gate:.3e}")
            gate_failed = True
    write_csv_rows(layout.reports / "train_summary.csv", ["d_E", "final_loss", "one_step_rmse"], rows)
    return EXIT_GATE if gate_failed else EXIT_OK


def _resolve_delay(spec, series: np.ndarray, cfg: ExperimentConfig) -> tuple[int, int]:
    b = cfg.baselines
    tau = spec.tau
    if tau == "mi":
        tau = lag_by_mutual_information(series, b.max_lag, b.mi_bins).tau
    elif tau == "corr":
        tau = lag_by_autocorrelation(series, max(b.max_lag, 100)).tau
    d_E = spec.d_E
    if d_E == "fnn":
        d_E = embedding_dim_fnn(series, tau)[0]
    elif d_E == "takens":
        d_E = int(math.ceil(2 * b.attractor_dim + 1))
    return int(tau), int(d_E)


def _lyapunov_of(generate, ev, dt: float) -> float | str:
    """lambda1 of a generated scalar series; ``DIVERGED`` if generation blows up, NaN if unestimable."""
    try:
        series = np.asarray(generate(ev.lyapunov_spinup + ev.lyapunov_length), dtype=float)
    except (IntegrationDivergedError, DivergedError, FloatingPointError):
        return DIVERGED
    if series.ndim > 1:
        series = series[:, 0]
    series = series[ev.lyapunov_spinup :]
    if not np.all(np.isfinite(series)):
        return DIVERGED
    try:
        return rosenstein(series, dt, tau=ev.lyapunov_tau, dim=ev.lyapunov_dim).exponent
    except DataError:
        return float("nan")


def _benchmark_row(label, kind, tau, d_E, forecaster, data, cfg, layout, console) -> list:
    ev = cfg.evaluation
    hmax = max(ev.horizons)
    x_test = data.test_observed.values[:, :1]
    seqs = make_test_windows(x_test, ev.history, hmax, count=ev.n_windows)
    report = forecast_rmse(forecaster, seqs, ev.horizons, ev.history)
    x_train = data.observed.values[:, 0]
    history = x_train[-ev.history :][:, None]
    lyap = _lyapunov_of(lambda n: forecaster.generate(history, n), ev, data.observed.dt)
    # overlay figure on the first test window
    horizon = min(cfg.forecast.horizon, len(x_test) - ev.history)
    try:
        pred = forecaster(x_test[None, : ev.history], horizon)[0, :, 0]
    except (IntegrationDivergedError, DivergedError):
        pred = np.full(horizon, np.nan)
    t = np.arange(1, horizon + 1) * data.observed.dt
    safe = label.replace(" ", "_").replace("=", "")
    plotting.line_plot(layout.figures / f"benchmark_{safe}.svg", t, {"truth": x_test[ev.history : ev.history + horizon, 0], label: pred}, title=label, xlabel="lead time")
    console.progress(f"{label}: rmse {report.rmse} lambda1 {lyap}")
    return [kind, tau, d_E] + [_fmt(report.rmse[h]) for h in ev.horizons] + [_fmt(lyap), report.n_diverged]


def cmd_benchmark(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    data = build_dataset(cfg)
    write_dataset(data, layout)
    if data.observed.n != 1:
        raise ConfigError("dataset.observe", "the benchmark compares scalar observation series")
    ev = cfg.evaluation
    x_train = data.observed.values[:, 0]
    header = ["method", "tau", "d_E"] + [f"rmse_h{h}" for h in ev.horizons] + ["lambda1", "n_diverged"]
    rows = []
    for spec in cfg.baselines.analog:
        tau, d_E = _resolve_delay(spec, x_train, cfg)
        try:
            fc = AnalogForecaster(x_train, tau, d_E, spec.k, spec.regression)
            rows.append(_benchmark_row(f"AF tau={tau} dE={d_E}", "AF", tau, d_E, fc, data, cfg, layout, console))
        except (DataError, ValueError, np.linalg.LinAlgError) as exc:
            console.progress(f"AF tau={tau} d_E={d_E} failed: {exc}")
            rows.append(["AF", tau, d_E] + [DIVERGED] * (len(ev.horizons) + 1) + [""])
    for spec in cfg.baselines.sparse:
        tau, d_E = _resolve_delay(spec, x_train, cfg)
        try:
            fc = SparseForecaster(x_train, data.observed.dt, tau, d_E, spec.threshold)
            write_sparse_model(layout.models / f"sparse_tau{tau}_dE{d_E}.csv", fc.model)
            rows.append(_benchmark_row(f"SR tau={tau} dE={d_E}", "SR", tau, d_E, fc, data, cfg, layout, console))
        except (DataError, ValueError, np.linalg.LinAlgError) as exc:
            console.progress(f"SR tau={tau} d_E={d_E} failed: {exc}")
            rows.append(["SR", tau, d_E] + [DIVERGED] * (len(ev.horizons) + 1) + [""])
    tcfg = train_config(cfg)
    for d_E in cfg.model.dims:
        try:
            path = model_path(layout, d_E)
            trained = None
            if path.exists():
                cached = load_model(path)
                if asdict(cached.config) == asdict(tcfg) and np.array_equal(cached.train_latents.x, data.observed.values):
                    trained = cached
                    console.progress(f"d_E={d_E}: reusing {path}")
            if trained is None:
                trained = _train_one(cfg, data, d_E, layout, console, resume=False)
            fc = NbedDynForecaster(trained, infer_config(cfg), cfg.inference.window)
            rows.append(_benchmark_row(f"NbedDyn dE={d_E}", "NbedDyn", "", d_E, fc, data, cfg, layout, console))
        except (DivergedError, IntegrationDivergedError, DataError) as exc:
            console.progress(f"NbedDyn d_E={d_E} failed: {exc}")
            rows.append(["NbedDyn", "", d_E] + [DIVERGED] * (len(ev.horizons) + 1) + [""])
    write_csv_rows(layout.reports / "benchmark.csv", header, rows)
    truth_l = _lyapunov_of(lambda n: simulate_lorenz63(cfg.dataset.initial_state, cfg.dataset.dt, n - 1, transient=cfg.dataset.transient).values[:, 0], ev, cfg.dataset.dt) if cfg.dataset.system == "lorenz63" else None
    write_csv_rows(layout.reports / "benchmark_reference.csv", ["series", "lambda1"], [["truth", _fmt(truth_l)]])
    for r in rows:
        console.result(",".join(str(v) for v in r))
    return EXIT_OK


def _apply_corruption(values: np.ndarray, mask: np.ndarray, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    f = cfg.forecast
    if f.noise > 0:
        values = values + f.noise * rng.standard_normal(values.shape)
    if f.mask_fraction > 0:
        mask = mask & (rng.random(values.shape) >= f.mask_fraction)
    return values, mask


def cmd_forecast(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    horizon = args.horizon if args.horizon is not None else cfg.forecast.horizon
    if horizon < 1:
        raise ConfigError("forecast.horizon", "must be >= 1")
    trained = load_model(args.model)
    series, mask = read_series_csv(args.observations, with_mask=True)
    if series.n != trained.n_obs:
        raise SchemaError(f"observations have {series.n} columns, model expects {trained.n_obs}")
    values, mask = _apply_corruption(series.values, mask, cfg)
    if not mask.any():
        raise DataError("observation mask removes all data")
    X_T, states = infer_initial_condition(trained, values, infer_config(cfg), mask)
    t_last = series.times[-1]
    fc = forecast(trained, X_T, horizon, start_time=t_last)
    write_series_csv(layout.reports / "forecast.csv", fc)
    write_csv_rows(
        layout.reports / "forecast_window_states.csv",
        ["t"] + [f"X{i + 1}" for i in range(states.shape[1])],
        [[float(series.times[k])] + [float(v) for v in states[k]] for k in range(len(states))],
    )
    curves = {"forecast": fc.values[:, 0]}
    if args.truth:
        truth = read_series_csv(args.truth)
        after = truth.times > t_last + 0.5 * series.dt
        tv = truth.values[after][:horizon, : trained.n_obs]
        if len(tv) < horizon:
            raise DataError(f"truth file covers {len(tv)} of {horizon} forecast steps")
        err = fc.values - tv
        mse = float(np.mean(err**2))
        per_step = np.mean(err**2, axis=1)
        write_csv_rows(layout.reports / "forecast_metrics.csv", ["step", "squared_error"], [[k + 1, float(v)] for k, v in enumerate(per_step)])
        write_csv_rows(layout.reports / "forecast_summary.csv", ["horizon", "mse", "rmse"], [[horizon, mse, math.sqrt(mse)]])
        curves["truth"] = tv[:, 0]
        console.result(f"forecast MSE over {horizon} steps: {mse:.6e}")
    else:
        console.result(f"forecast of {horizon} steps written")
    plotting.line_plot(layout.figures / "forecast.svg", fc.times, curves, title="forecast of the first observed component")
    hist_curves = {"observed": np.where(mask[:, 0], values[:, 0], np.nan), "inferred": states[:, 0]}
    plotting.line_plot(layout.figures / "forecast_window.svg", series.times, hist_curves, title="conditioning window")
    return EXIT_OK


def cmd_spectrum(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    trained = load_model(args.model, require_latents=True)
    ev = cfg.evaluation
    report = jacobian_spectrum(trained, ev.spectrum_stride, ev.spectrum_threshold)
    report.to_csv(layout.reports / "spectrum.csv")
    d = len(report.mean_modulus)
    k = min(3, d)
    gap = report.gap_ratio(k)
    write_csv_rows(layout.reports / "spectrum_summary.csv", ["d_E", "effective_dimension", "threshold", f"gap_ratio_top{k}"], [[d, report.effective_dimension, report.threshold, gap]])
    plotting.bar_plot(layout.figures / "spectrum.svg", [str(r + 1) for r in range(d)], report.mean_modulus, title="mean eigenvalue modulus per rank", ylabel="|eigenvalue|", logy=True)
    console.result(f"effective dimension: {report.effective_dimension} of {d}")
    console.result("mean moduli: " + " ".join(f"{v:.4g}" for v in report.mean_modulus))
    console.result(f"gap ratio (top {k} vs rest): {gap:.4g}")
    return EXIT_OK


def cmd_lyapunov(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    ev = cfg.evaluation
    if args.series:
        series = read_series_csv(args.series)
        values, dt, source = series.values[:, args.column - 1], series.dt, str(args.series)
    elif args.model:
        trained = load_model(args.model, require_latents=True)
        states = forecast_states(trained, trained.train_latents.X[-1], ev.lyapunov_spinup + ev.lyapunov_length)
        values, dt, source = states[ev.lyapunov_spinup :, 0], trained.dt, str(args.model)
    else:
        data = build_dataset(cfg)
        values, dt, source = data.observed.values[:, 0], data.observed.dt, "observed training series"
    res = rosenstein(values, dt, tau=ev.lyapunov_tau, dim=ev.lyapunov_dim)
    # file name only: the table must not depend on where the inputs live
    label = Path(source).name if (args.series or args.model) else source
    write_csv_rows(layout.reports / "lyapunov.csv", ["source", "lambda1", "theiler", "fit_start", "fit_end", "n_pairs"], [[label, res.exponent, res.theiler, *res.fit_steps, res.n_pairs]])
    write_csv_rows(layout.reports / "lyapunov_divergence.csv", ["step", "mean_log_separation"], [[k, float(v)] for k, v in enumerate(res.divergence)])
    plotting.line_plot(layout.figures / "lyapunov.svg", np.arange(len(res.divergence)) * dt, {"mean log separation": res.divergence}, title="nearest-neighbour divergence", xlabel="time")
    console.result(f"lambda1 = {res.exponent:.4f} ({source})")
    return EXIT_OK


def cmd_embed_params(cfg: ExperimentConfig, layout: RunLayout, console: Console, args) -> int:
    data = build_dataset(cfg)
    x = data.observed.values[:, 0]
    b = cfg.baselines
    mi = lag_by_mutual_information(x, b.max_lag, b.mi_bins)
    ac = lag_by_autocorrelation(x, max(b.max_lag, 100))
    d_fnn, fractions = embedding_dim_fnn(x, mi.tau)
    rows = [["tau_MI", mi.tau], ["tau_Corr", ac.tau], ["d_E_FNN", d_fnn], ["d_E_Takens", int(math.ceil(2 * b.attractor_dim + 1))]]
    write_csv_rows(layout.reports / "embed_params.csv", ["estimator", "value"], rows)
    write_csv_rows(layout.reports / "mutual_information.csv", ["lag", "mutual_information"], [[k, float(v)] for k, v in enumerate(mi.curve)])
    write_csv_rows(layout.reports / "autocorrelation.csv", ["lag", "autocorrelation"], [[k, float(v)] for k, v in enumerate(ac.curve)])
    write_csv_rows(layout.reports / "fnn.csv", ["dimension", "false_neighbour_fraction"], [[k + 1, float(v)] for k, v in enumerate(fractions)])
    plotting.line_plot(layout.figures / "mutual_information.svg", np.arange(len(mi.curve)), {"MI": mi.curve}, title="mutual information", xlabel="lag")
    console.result(f"tau_MI = {mi.tau}")
    console.result(f"tau_Corr = {ac.tau}")
    console.result(f"d_E(FNN) = {d_fnn}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "benchmark": cmd_benchmark,
    "lyapunov": cmd_lyapunov,
    "spectrum": cmd_spectrum,
    "embed-params": cmd_embed_params,
}


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="YAML experiment configuration")
    parser.add_argument("--seed", type=int, default=default, help="override the configured seed")
    parser.add_argument("--out", type=Path, default=default, help="override the output directory")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False, help="silence progress messages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbeddyn", description="Latent-embedding ODE learning, forecasting and benchmarks.")
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)

    sub.add_parser("simulate", parents=[common], help="generate training and test series")
    p = sub.add_parser("train", parents=[common], help="train NbedDyn models")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--d-E", dest="d_E", type=int, default=None, help="train only this augmented dimension")
    p = sub.add_parser("forecast", parents=[common], help="infer a latent state and forecast")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--observations", type=Path, required=True)
    p.add_argument("--truth", type=Path, default=None)
    p.add_argument("--horizon", type=int, default=None)
    sub.add_parser("benchmark", parents=[common], help="compare NbedDyn, analog and sparse-regression forecasts")
    p = sub.add_parser("lyapunov", parents=[common], help="largest Lyapunov exponent of a series or model")
    p.add_argument("--series", type=Path, default=None)
    p.add_argument("--column", type=int, default=1)
    p.add_argument("--model", type=Path, default=None)
    p = sub.add_parser("spectrum", parents=[common], help="Jacobian eigenvalue spectrum of a trained model")
    p.add_argument("--model", type=Path, required=True)
    sub.add_parser("embed-params", parents=[common], help="delay-embedding lag and dimension estimates")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    console = Console(args.quiet)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "output_dir": None if args.out is None else str(args.out)})
        layout = RunLayout(cfg.run_dir)
        return COMMANDS[args.command](cfg, layout, console, args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergedError, IntegrationDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, SchemaError, DimensionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
