import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nbeddyn.dynamics import Lorenz63Field, TimeSeries
from nbeddyn.errors import DataError, DimensionError, SchemaError
from nbeddyn.model import (
    BilinearODEModel,
    InferConfig,
    LatentTrajectory,
    TrainConfig,
    TrainedModel,
    eval_field,
    forecast,
    forecast_states,
    infer_initial_condition,
    infer_initial_conditions,
    init_latent,
    load_model,
    lorenz_as_bilinear,
    model_from_dict,
    model_to_dict,
    nearest_training_init,
    nearest_training_offsets,
    save_model,
    train,
)
from nbeddyn.numerics import (
    IntegratorConfig,
    central_difference_gradient,
    finite_difference_jacobian,
    loss_and_gradients,
    relative_error,
    rk4_step,
)


def decay_series(T=400, dt=0.01, x0=1.0):
    t = dt * np.arange(T)
    return TimeSeries(x0 * np.exp(-t), dt)


@pytest.fixture(scope="module")
def small_trained():
    """A short joint fit on Lorenz x1 (enough to exercise inference and persistence)."""
    from nbeddyn.dynamics import simulate_lorenz63

    s = simulate_lorenz63([1.0, 1.0, 1.0], 0.01, 600, transient=500)
    obs = TimeSeries(s.values[:, :1], 0.01)
    return train(obs, 3, TrainConfig(epochs=150, seed=3))


# -- field evaluation ----------------------------------------------------------------


def test_zero_model_evaluates_to_zero(rng):
    m = BilinearODEModel.zeros(4, 1)
    np.testing.assert_array_equal(eval_field(m, rng.standard_normal(4)), np.zeros(4))


def test_model_at_origin_returns_bias(rng):
    m = BilinearODEModel.random(4, 1, rng, scale=1.0)
    np.testing.assert_array_equal(eval_field(m, np.zeros(4)), m.c)


def test_model_represents_lorenz_exactly(rng):
    m = lorenz_as_bilinear()
    f = Lorenz63Field()
    X = 20 * rng.standard_normal((50, 3))
    assert np.max(np.abs(eval_field(m, X) - f(X))) <= 1e-12 * np.max(np.abs(f(X)))


def test_model_dimension_checks():
    with pytest.raises(DimensionError):
        BilinearODEModel.zeros(2, 3)
    with pytest.raises(DimensionError):
        eval_field(BilinearODEModel.zeros(3, 1), np.zeros(2))


def test_linear_model_is_affine(rng):
    m = BilinearODEModel.random(3, 1, rng, quadratic=False)
    X = rng.standard_normal(3)
    np.testing.assert_allclose(eval_field(m, 2 * X) - eval_field(m, X), eval_field(m, X) - eval_field(m, 0 * X), atol=1e-14)


@given(seed=st.integers(0, 2**31 - 1), layers=st.integers(0, 2))
def test_model_gradients_match_finite_differences(seed, layers):
    rng = np.random.default_rng(seed)
    m = BilinearODEModel.random(3, 1, rng, scale=0.3, layers=layers, width=4)
    cfg = IntegratorConfig(0.05)
    x = rng.standard_normal((5, 1))
    y = rng.standard_normal((5, 2))
    res = loss_and_gradients(m, x, y, 0.7, cfg)
    fd_theta = central_difference_gradient(lambda t: loss_and_gradients(m.with_theta(t), x, y, 0.7, cfg).loss, m.theta(), 1e-5)
    fd_y = central_difference_gradient(lambda v: loss_and_gradients(m, x, v, 0.7, cfg).loss, y, 1e-5)
    assert np.max(relative_error(res.grad_theta, fd_theta, floor=1e-4)) <= 1e-5
    assert np.max(relative_error(res.grad_latent, fd_y, floor=1e-4)) <= 1e-5


@given(seed=st.integers(0, 2**31 - 1), layers=st.integers(0, 2))
def test_model_jacobian_matches_finite_differences(seed, layers):
    rng = np.random.default_rng(seed)
    m = BilinearODEModel.random(3, 1, rng, scale=0.5, layers=layers, width=5)
    X = rng.standard_normal(3)
    np.testing.assert_allclose(m.jacobian(X), finite_difference_jacobian(m, X), atol=1e-8)


def test_param_jacobian_unavailable_with_dense_layers(rng):
    m = BilinearODEModel.random(3, 1, rng, layers=1, width=3)
    with pytest.raises(NotImplementedError):
        m.param_jacobian(np.zeros(3))


# -- latent initialisation ----------------------------------------------------------


def test_init_latent_zero_scale():
    np.testing.assert_array_equal(init_latent(10, 3, 0.0, 5), np.zeros((10, 3)))


def test_init_latent_deterministic():
    assert init_latent(50, 2, 0.1, 9).tobytes() == init_latent(50, 2, 0.1, 9).tobytes()


def test_init_latent_statistics():
    y = init_latent(100000, 1, 0.1, 4)
    assert 0.099 <= np.std(y) <= 0.101


# -- training ----------------------------------------------------------------------


def test_train_rejects_bad_inputs():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(refine_iterations=5, layers=1, width=2)
    with pytest.raises(DimensionError):
        train(TimeSeries(np.zeros((10, 2)), 0.1), 1, TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train(TimeSeries(np.zeros((2, 1)), 0.1), 2, TrainConfig(epochs=1))


def test_train_best_iterate_not_worse_than_start(small_trained):
    assert np.all(np.isfinite(small_trained.loss_history))
    assert small_trained.loss() <= small_trained.loss_history[0]
    assert small_trained.loss() == pytest.approx(min(small_trained.loss_history), rel=1e-12)


def test_train_keeps_observed_components(small_trained):
    from nbeddyn.dynamics import simulate_lorenz63

    s = simulate_lorenz63([1.0, 1.0, 1.0], 0.01, 600, transient=500)
    np.testing.assert_array_equal(small_trained.train_latents.x[:, 0], s.values[:, 0])
    np.testing.assert_array_equal(small_trained.train_latents.X[:, :1], small_trained.train_latents.x)


def test_train_is_deterministic():
    obs = decay_series(100)
    a = train(obs, 2, TrainConfig(epochs=30, seed=7))
    b = train(obs, 2, TrainConfig(epochs=30, seed=7))
    assert a.model.theta().tobytes() == b.model.theta().tobytes()
    assert np.asarray(a.loss_history).tobytes() == np.asarray(b.loss_history).tobytes()


def test_train_resume_reproduces_history():
    obs = decay_series(100)
    cfg = TrainConfig(epochs=40, seed=1)
    full = train(obs, 2, cfg)
    saved = {}

    def keep(state, _):
        if state.iteration == 20:
            saved["state"] = type(state).from_dict(json.loads(json.dumps(state.to_dict())))

    train(obs, 2, cfg, callback=keep, callback_every=10)
    resumed = train(obs, 2, cfg, resume=saved["state"])
    assert np.asarray(resumed.loss_history).tobytes() == np.asarray(full.loss_history).tobytes()
    assert resumed.model.theta().tobytes() == full.model.theta().tobytes()


def test_train_alternating_mode_runs():
    obs = decay_series(100)
    tm = train(obs, 2, TrainConfig(epochs=40, mode="alternating", alternate_every=10))
    assert tm.loss() <= tm.loss_history[0]


def test_train_exponential_decay_fully_observed():
    obs = decay_series(1000)
    tm = train(obs, 2, TrainConfig(epochs=300, seed=0, refine_iterations=30))
    assert tm.one_step_rmse() < 1e-6
    # the learned flow reproduces the decay from a fresh start
    X0 = tm.train_latents.X[0]
    pred = forecast(tm, X0, 200).values[:, 0]
    np.testing.assert_allclose(pred, obs.values[1:201, 0], atol=1e-4)


def test_lambda_zero_matches_least_squares():
    obs = decay_series(400)
    x = obs.values[:, 0]
    design = np.column_stack([x[:-1], np.ones(len(x) - 1)])
    coef = np.linalg.lstsq(design, x[1:], rcond=None)[0]
    ls_rmse = float(np.sqrt(np.mean((design @ coef - x[1:]) ** 2)))
    tm = train(obs, 2, TrainConfig(lam=0.0, epochs=3000, lr_final_fraction=0.01, quadratic=False, seed=0))
    assert abs(tm.one_step_rmse() - ls_rmse) <= 1e-6


def test_refinement_never_worsens_loss():
    obs = decay_series(200)
    base = train(obs, 2, TrainConfig(epochs=50, seed=2))
    refined = train(obs, 2, TrainConfig(epochs=50, seed=2, refine_iterations=10))
    assert refined.loss() <= base.loss()
    assert len(refined.loss_history) >= len(base.loss_history)


# -- nearest-training initialisation -------------------------------------------------


def test_nearest_init_exact_window(small_trained):
    x = small_trained.train_latents.x
    window = x[123:173]
    off, dist = nearest_training_offsets(x, window[None])
    assert off[0] == 123 and dist[0] == 0.0
    np.testing.assert_array_equal(nearest_training_init(small_trained, window), small_trained.train_latents.y[123:173])


def test_nearest_init_with_small_noise_matches_brute_force(small_trained, rng):
    x = small_trained.train_latents.x
    window = x[300:340] + 1e-4 * rng.standard_normal((40, 1))
    brute = np.argmin([np.sum((x[o : o + 40] - window) ** 2) for o in range(len(x) - 39)])
    off, _ = nearest_training_offsets(x, window[None])
    assert off[0] == brute == 300


def test_nearest_init_tie_breaks_to_earliest():
    x = np.tile([0.0, 1.0, 2.0, 3.0], 10)[:, None]
    off, _ = nearest_training_offsets(x, np.array([[[1.0], [2.0]]]))
    assert off[0] == 1


def test_nearest_init_window_too_long(small_trained):
    with pytest.raises(DataError):
        nearest_training_init(small_trained, np.zeros((10000, 1)))


# -- initial-condition inference ------------------------------------------------------


@pytest.fixture(scope="module")
def linear_trained():
    """Converged d_E=2 fit of the real part of a damped complex exponential."""
    from nbeddyn.dynamics import ObservationOperator, observe, simulate_linear_complex

    obs = observe(simulate_linear_complex(steps=2000), ObservationOperator.real_part())
    return train(obs, 2, TrainConfig(epochs=300, quadratic=False, refine_iterations=30, seed=0))


def test_inference_on_training_window_is_self_consistent(linear_trained):
    tr = linear_trained
    start, W = 200, 50
    window = tr.train_latents.x[start : start + W]
    X = tr.train_latents.X[start : start + W]
    from nbeddyn.numerics import sequence_objective

    train_residual = sequence_objective(tr.model, X, window, tr.config.lam, tr.integrator, need_theta=False).loss
    theta_before = tr.model.theta().copy()
    res = infer_initial_conditions(tr, window[None], InferConfig(iterations=200))
    assert res.init_loss[0] <= train_residual + 1e-12
    assert res.init_offset[0] == start
    np.testing.assert_allclose(res.X_T[0], X[-1], atol=1e-3)
    assert tr.model.theta().tobytes() == theta_before.tobytes()


def test_inference_never_changes_parameters(small_trained, rng):
    before = small_trained.model.theta().tobytes()
    window = small_trained.train_latents.x[10:40] + 0.01 * rng.standard_normal((30, 1))
    infer_initial_condition(small_trained, window, InferConfig(iterations=50, init="random"))
    assert small_trained.model.theta().tobytes() == before


def test_inference_reduces_objective_from_random_start(small_trained):
    window = small_trained.train_latents.x[400:450]
    res = infer_initial_conditions(small_trained, window[None], InferConfig(iterations=300, init="random", seed=1))
    assert res.loss[0] < res.init_loss[0]


def test_inference_masked_window(small_trained):
    window = small_trained.train_latents.x[100:150].copy()
    mask = np.ones_like(window, dtype=bool)
    mask[::3] = False
    window[~mask] = 0.0
    X_T, states = infer_initial_condition(small_trained, window, InferConfig(iterations=100), mask=mask)
    assert X_T.shape == (3,)
    assert np.all(np.isfinite(states))
    # observed entries are kept as data; masked ones become free variables
    np.testing.assert_array_equal(states[mask[:, 0], 0], window[mask[:, 0], 0])


def test_inference_fully_masked_is_an_error(small_trained):
    window = small_trained.train_latents.x[:20]
    with pytest.raises(DataError):
        infer_initial_condition(small_trained, window, mask=np.zeros_like(window, dtype=bool))


def test_inference_rejects_empty_and_wrong_dimension(small_trained):
    with pytest.raises(DataError):
        infer_initial_condition(small_trained, np.zeros((0, 1)))
    with pytest.raises(DataError):
        infer_initial_condition(small_trained, np.zeros((1, 1)))
    with pytest.raises(DimensionError):
        infer_initial_condition(small_trained, np.zeros((10, 2)))


# -- forecasting ----------------------------------------------------------------------


def test_forecast_one_step_matches_training_prediction(small_trained):
    X = small_trained.train_latents.X
    pred = forecast(small_trained, X[57], 1)
    assert pred.values[0, 0] == small_trained.one_step_predictions()[57, 0]


def test_forecast_shapes_and_time(small_trained):
    out = forecast(small_trained, small_trained.train_latents.X[0], 25, start_time=1.0)
    assert out.values.shape == (25, 1)
    assert out.start_time == pytest.approx(1.01)
    assert forecast_states(small_trained, small_trained.train_latents.X[0], 25).shape == (25, 3)


def test_forecast_rejects_zero_horizon(small_trained):
    with pytest.raises(ValueError):
        forecast(small_trained, small_trained.train_latents.X[0], 0)


# -- persistence ----------------------------------------------------------------------


def test_model_round_trip_is_exact(small_trained, tmp_path):
    path = tmp_path / "m.json"
    save_model(small_trained, path)
    back = load_model(path, require_latents=True)
    assert back.model.theta().tobytes() == small_trained.model.theta().tobytes()
    assert back.train_latents.y.tobytes() == small_trained.train_latents.y.tobytes()
    assert back.config == small_trained.config
    assert back.dt == small_trained.dt


def test_model_round_trip_with_dense_layers(rng, tmp_path):
    m = BilinearODEModel.random(3, 1, rng, layers=2, width=4)
    tm = TrainedModel(m, LatentTrajectory(np.zeros((3, 1)), np.zeros((3, 2))), np.array([1.0]), TrainConfig(layers=2, width=4), 0.1)
    save_model(tm, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    X = rng.standard_normal(3)
    np.testing.assert_array_equal(back.model(X), m(X))


def test_model_rejects_unknown_schema_version(small_trained):
    doc = model_to_dict(small_trained)
    doc["schema_version"] = 99
    with pytest.raises(SchemaError):
        model_from_dict(doc)


@pytest.mark.parametrize("text", ["not json", "[]", '{"schema": "other"}', '{"schema": "nbeddyn-model", "schema_version": 1}'])
def test_model_rejects_corrupt_documents(tmp_path, text):
    path = tmp_path / "m.json"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(SchemaError):
        load_model(path)


def test_model_without_latents(small_trained):
    doc = model_to_dict(small_trained)
    del doc["train_latents"]
    assert len(model_from_dict(doc).train_latents.x) == 0
    with pytest.raises(SchemaError):
        model_from_dict(doc, require_latents=True)


def test_one_step_rmse_matches_direct_computation(small_trained):
    X = small_trained.train_latents.X
    pred = rk4_step(small_trained.model, X[:-1], small_trained.integrator)[:, 0]
    direct = math.sqrt(np.mean((X[1:, 0] - pred) ** 2))
    assert small_trained.one_step_rmse() == pytest.approx(direct, rel=1e-12)
