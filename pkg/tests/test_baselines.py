import numpy as np
import pytest

from nbeddyn.baselines import (
    AnalogCatalog,
    AnalogForecaster,
    SparseForecaster,
    analog_forecast,
    analog_step,
    monomial_names,
    polynomial_library,
    read_sparse_model,
    sparse_fit,
    sparse_forecast,
    stlsq,
    write_sparse_model,
)
from nbeddyn.dynamics import simulate_linear_complex, simulate_lorenz63
from nbeddyn.embedding import delay_vectors
from nbeddyn.errors import DataError, DimensionError, SchemaError
from nbeddyn.evaluation import forecast_rmse, make_test_windows

LORENZ_TRUE = {
    # (output, term): coefficient of dx/dt = 10(y-x), dy/dt = x(28-z)-y, dz/dt = xy - 8/3 z
    (0, "x1"): -10.0,
    (0, "x2"): 10.0,
    (1, "x1"): 28.0,
    (1, "x2"): -1.0,
    (1, "x1*x3"): -1.0,
    (2, "x3"): -8.0 / 3.0,
    (2, "x1*x2"): 1.0,
}


@pytest.fixture(scope="module")
def lorenz_fine():
    """Fully observed Lorenz-63 sampled finely enough that centred differences are accurate to ~1e-4."""
    return simulate_lorenz63([1.0, 1.0, 1.0], 0.001, 10000, transient=10000)


def assert_lorenz_structure(model, rel):
    for i in range(3):
        for j, name in enumerate(model.terms):
            true = LORENZ_TRUE.get((i, name), 0.0)
            if true == 0.0:
                assert not model.mask[i, j], f"spurious term {name} in output {i}"
            elif rel is not None:
                assert model.coefficients[i, j] == pytest.approx(true, rel=rel)
    assert model.mask.sum() == 7


# -- analog forecasting ------------------------------------------------------------


def test_catalog_validation():
    with pytest.raises(DimensionError):
        AnalogCatalog(np.zeros((5, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        AnalogCatalog(np.zeros((5, 2)), np.zeros((5, 2)), k=0)
    with pytest.raises(ValueError):
        AnalogCatalog(np.zeros((5, 2)), np.zeros((5, 2)), regression="cubic")


def test_k_exceeding_catalog_raises():
    cat = AnalogCatalog(np.zeros((5, 2)), np.zeros((5, 2)), k=6)
    with pytest.raises(ValueError):
        analog_step(cat, np.zeros(2))


def test_k1_query_in_catalog_returns_stored_successor(lorenz_x1):
    emb = delay_vectors(lorenz_x1[:3000], 10, 3)
    cat = AnalogCatalog.from_embedding(emb, k=1)
    idx = np.arange(0, len(cat), 97)
    np.testing.assert_array_equal(analog_step(cat, cat.predecessors[idx]), cat.successors[idx])


def test_locally_linear_exact_on_linear_dynamics():
    states = simulate_linear_complex(-0.1 - 0.5j, 1.0, 0.05, 2000).values
    cat = AnalogCatalog.from_embedding(states, k=40)
    # queries lie inside the hull of the spiral but are not catalog members
    queries = 0.5 * (states[300:320] + states[301:321])
    step = simulate_linear_complex(-0.1 - 0.5j, 1.0, 0.05, 1)
    z = queries[:, 0] + 1j * queries[:, 1]
    factor = complex(*step.values[1])
    expected = np.column_stack([(z * factor).real, (z * factor).imag])
    np.testing.assert_allclose(analog_step(cat, queries), expected, atol=1e-8)


def test_locally_constant_is_convex_combination(lorenz_x1):
    emb = delay_vectors(lorenz_x1[:3000], 10, 3)
    cat = AnalogCatalog.from_embedding(emb, k=10, regression="locally_constant")
    q = emb[100] + 0.01
    out = analog_step(cat, q)[0]
    _, idx = cat.tree.query(q, k=10)
    succ = cat.successors[idx]
    assert np.all(out >= succ.min(axis=0) - 1e-12) and np.all(out <= succ.max(axis=0) + 1e-12)


def test_analog_forecast_shapes_and_feedback(lorenz_x1):
    emb = delay_vectors(lorenz_x1[:3000], 10, 3)
    cat = AnalogCatalog.from_embedding(emb, k=1)
    traj = analog_forecast(cat, emb[50], 3)
    assert traj.shape == (3, 3)
    np.testing.assert_array_equal(traj, emb[51:54])
    assert analog_forecast(cat, emb[50:52], 2).shape == (2, 2, 3)


def test_analog_forecaster_one_step(lorenz_x1):
    fc = AnalogForecaster(lorenz_x1[:5000], 10, 3)
    hist = lorenz_x1[5000:5100]
    assert fc(hist[None], 1).shape == (1, 1, 1)
    # skill on windows from the unseen second half, well below the one-step increment RMS (~0.4)
    seqs = make_test_windows(lorenz_x1[5000:], 100, 1, count=200)
    assert forecast_rmse(fc, seqs, [1], 100).rmse[1] < 1e-2
    with pytest.raises(DataError):
        fc(hist[None, :10], 1)


# -- sparse regression -------------------------------------------------------------


def test_monomial_library_layout():
    assert monomial_names(2) == ["1", "x1", "x2", "x1*x1", "x1*x2", "x2*x2"]
    lib = polynomial_library(np.array([[2.0, 3.0]]))
    np.testing.assert_array_equal(lib, [[1, 2, 3, 4, 6, 9]])


def test_sparse_fit_recovers_lorenz(lorenz_fine):
    model = sparse_fit(lorenz_fine.values, lorenz_fine.dt, threshold=0.05)
    assert_lorenz_structure(model, rel=1e-2)


def test_sparse_fit_coarse_sampling_keeps_structure(lorenz_train):
    # at dt=0.01 the O(dt^2) derivative bias moves coefficients by a few percent,
    # but the active set is still exactly the true one
    assert_lorenz_structure(sparse_fit(lorenz_train.values, lorenz_train.dt, threshold=0.05), rel=5e-2)


def test_sparse_mask_invariant(lorenz_train):
    model = sparse_fit(lorenz_train.values, lorenz_train.dt, threshold=0.05)
    assert np.all(np.abs(model.coefficients[model.mask]) >= 0.05)
    assert np.all(model.coefficients[~model.mask] == 0.0)


def test_threshold_zero_is_least_squares(rng):
    X = rng.standard_normal((200, 2))
    lib = polynomial_library(X)
    y = rng.standard_normal((200, 2))
    xi, mask = stlsq(lib, y, 0.0)
    assert mask.all()
    np.testing.assert_allclose(xi.T, np.linalg.lstsq(lib, y, rcond=None)[0], atol=1e-12)


def test_stlsq_is_idempotent(lorenz_train):
    model = sparse_fit(lorenz_train.values, lorenz_train.dt, threshold=0.05)
    lib = polynomial_library(lorenz_train.values)
    deriv = np.gradient(lorenz_train.values, lorenz_train.dt, axis=0)
    for i in range(3):
        active = model.mask[i]
        refit = np.linalg.lstsq(lib[:, active], deriv[:, i], rcond=None)[0]
        np.testing.assert_allclose(refit, model.coefficients[i, active], rtol=1e-10, atol=1e-12)


def test_rank_deficient_library_names_columns():
    t = np.linspace(0, 1, 50)
    data = np.column_stack([t, 2 * t])  # second coordinate is a multiple of the first
    with pytest.raises(np.linalg.LinAlgError, match=r"x\d"):
        sparse_fit(data, 0.1)


def test_sparse_fit_needs_enough_rows():
    with pytest.raises(DataError):
        sparse_fit(np.random.default_rng(0).standard_normal((5, 3)), 0.1)


def test_sparse_forecast_matches_lorenz(lorenz_fine):
    model = sparse_fit(lorenz_fine.values, lorenz_fine.dt, threshold=0.05)
    traj = sparse_forecast(model, lorenz_fine.values[100], 50)
    assert traj.shape == (50, 3)
    np.testing.assert_allclose(traj, lorenz_fine.values[101:151], atol=1e-3)


def test_sparse_model_csv_round_trip(tmp_path, lorenz_train):
    model = sparse_fit(lorenz_train.values, lorenz_train.dt, threshold=0.05)
    path = tmp_path / "sr.csv"
    write_sparse_model(path, model)
    back = read_sparse_model(path, dt=lorenz_train.dt)
    np.testing.assert_array_equal(back.coefficients, model.coefficients)
    np.testing.assert_array_equal(back.mask, model.mask)
    assert path.read_text(encoding="utf-8").splitlines()[0].startswith("output,1,x1,x2,x3,x1*x1")


def test_read_sparse_model_rejects_other_tables(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        read_sparse_model(path)
    path.write_text("output,1,x1,x9\ndx1/dt,0,0,0\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        read_sparse_model(path)


def test_sparse_forecaster_on_delay_embedding(lorenz_x1):
    fc = SparseForecaster(lorenz_x1, 0.01, 10, 3)
    hist = lorenz_x1[5000:5100]
    pred = fc(hist[None], 4)
    assert pred.shape == (1, 4, 1)
    err = abs(pred[0, 0, 0] - lorenz_x1[5100])
    assert np.isnan(err) or err < 1.0
