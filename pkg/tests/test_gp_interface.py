import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddmcmc.errors import PoolExhausted, ValidationError
from ddmcmc.field_model import Interface
from ddmcmc.gp_interface import (
    GPHyper,
    GPModel,
    active_fit,
    fit_hyper,
    fit_model,
    nlml,
    read_interface_csv,
    se_kernel,
    write_interface_csv,
)

IFACE = Interface(0, 1, (1.0, 0.0), (1.0, 1.0))


def dense_nlml(h, x, y):
    K = se_kernel(x, x, h) + h.noise_std ** 2 * np.eye(len(x))
    sign, logdet = np.linalg.slogdet(K)
    return 0.5 * logdet + 0.5 * y @ np.linalg.inv(K) @ y + 0.5 * len(x) * np.log(2 * np.pi)


def dense_predict(h, x, y, q):
    K = se_kernel(x, x, h) + h.noise_std ** 2 * np.eye(len(x))
    Ki = np.linalg.inv(K)
    ks = se_kernel(x, q, h)
    return ks.T @ Ki @ y, h.sigma_f ** 2 - np.einsum("ij,ik,kj->j", ks, Ki, ks)


def test_nlml_single_point_closed_form():
    h = GPHyper(0.7, 0.3, 0.1)
    assert nlml(h, [0.4], [0.0]) == pytest.approx(0.5 * np.log(0.49 + 0.01) + 0.5 * np.log(2 * np.pi), rel=1e-14)


def test_nlml_matches_dense_algebra():
    rng = np.random.default_rng(0)
    x = np.sort(rng.uniform(0, 1, 5))
    y = rng.normal(size=5)
    h = GPHyper(1.3, 0.4, 0.05)
    assert nlml(h, x, y) == pytest.approx(dense_nlml(h, x, y), abs=1e-10)


def test_nlml_finite_on_log_grid():
    rng = np.random.default_rng(1)
    x = np.linspace(0, 1, 6)
    y = np.sin(3 * x) + 0.01 * rng.normal(size=6)
    vals = [nlml(GPHyper(s, l), x, y) for s in np.logspace(-3, 3, 20) for l in np.logspace(-3, 3, 20)]
    assert np.all(np.isfinite(vals))


def test_nlml_validation():
    with pytest.raises(ValidationError):
        nlml(GPHyper(1, 1), [], [])
    with pytest.raises(ValidationError):
        GPHyper(0.0, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_fit_recovers_length_scale_of_gp_draw(seed):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, 30)
    true = GPHyper(1.0, 0.2)
    K = se_kernel(x, x, true) + 1e-10 * np.eye(30)
    y = np.linalg.cholesky(K) @ rng.normal(size=30)
    fit = fit_hyper(x, y, length=1.0)
    assert 0.5 * true.length_scale <= fit.hyper.length_scale <= 2 * true.length_scale


def test_constant_data_is_degenerate():
    x = np.array([0.1, 0.4, 0.8])
    fit = fit_hyper(x, np.full(3, 0.7))
    assert fit.degenerate and fit.hyper.sigma_f == 1e-8
    model = fit_model(x, np.full(3, 0.7))
    mean, var = model.predict(np.linspace(0, 1, 11))
    assert model.degenerate and np.allclose(mean, 0.7, atol=1e-12) and var.max() < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 8))
def test_fit_never_worse_than_grid(seed, n):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, n))
    x += np.arange(n) * 1e-3
    y = rng.normal(size=n)
    fit = fit_hyper(x, y, noise_std=0.01)
    assert fit.nlml <= fit.grid_min + 1e-12
    assert nlml(fit.hyper, x, y) == pytest.approx(fit.nlml, abs=1e-9)


def test_interpolation_at_training_inputs():
    x = np.array([0.1, 0.35, 0.7, 0.9])
    y = np.array([0.3, -0.2, 0.5, 0.1])
    h = GPHyper(0.8, 0.25)
    mean, var = GPModel.train(h, x, y).predict(x)
    assert np.allclose(mean, y, atol=1e-10) and np.all(var <= 1e-10 * h.sigma_f ** 2)


def test_prior_reversion_far_away():
    h = GPHyper(0.8, 0.1)
    mean, var = GPModel.train(h, [0.0, 0.2], [1.0, -1.0]).predict([50.0])
    assert abs(mean[0]) < 1e-12 and var[0] == pytest.approx(0.64)


def test_predict_matches_dense_oracle():
    rng = np.random.default_rng(3)
    x = np.sort(rng.uniform(0, 1, 7))
    y = rng.normal(size=7)
    q = np.linspace(-0.2, 1.2, 11)
    h = GPHyper(1.1, 0.3, 0.02)
    mean, var = GPModel.train(h, x, y).predict(q)
    m_ref, v_ref = dense_predict(h, x, y, q)
    assert np.allclose(mean, m_ref, atol=1e-10) and np.allclose(var, v_ref, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12))
def test_adding_points_never_increases_variance(seed, n):
    rng = np.random.default_rng(seed)
    h = GPHyper(1.0, float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.01, 0.1)))
    x = rng.uniform(0, 1, n + 1)
    y = rng.normal(size=n + 1)
    q = np.linspace(0, 1, 25)
    _, v_small = GPModel.train(h, x[:n], y[:n]).predict(q)
    _, v_big = GPModel.train(h, x, y).predict(q)
    assert np.all(v_big <= v_small + 1e-12)


def sensor_line(n=7):
    ys = 0.125 * np.arange(1, n + 1)
    return np.column_stack([np.ones(n), ys]), np.sin(np.pi * ys) + 0.2 * ys


def test_active_fit_infinite_threshold_stops_after_one_point():
    sensors, values = sensor_line()
    test = np.column_stack([np.ones(33), np.linspace(0, 1, 33)])
    fit = active_fit(IFACE, sensors, values, test, delta_tol=np.inf)
    assert fit.used == [3] and len(fit.history) == 1 and not fit.exhausted


def test_active_fit_adds_nearest_sensor_to_max_variance_point():
    sensors, values = sensor_line()
    test = np.column_stack([np.ones(33), np.linspace(0, 1, 33)])
    fit = active_fit(IFACE, sensors, values, test, delta_tol=1e-7)
    assert fit.used[0] == 3
    assert len(set(fit.used)) == len(fit.used)
    assert fit.sigma_max < 1e-7 or fit.exhausted
    assert fit.history[-1]["sigma_max"] == fit.sigma_max


def test_active_fit_exhaustion():
    sensors, values = sensor_line(3)
    test = np.column_stack([np.ones(33), np.linspace(0, 1, 33)])
    fit = active_fit(IFACE, sensors, values, test, delta_tol=1e-30, noise_std=0.01)
    assert fit.exhausted and sorted(fit.used) == [0, 1, 2]
    with pytest.raises(PoolExhausted):
        active_fit(IFACE, sensors, values, test, delta_tol=1e-30, noise_std=0.01, strict=True)


def test_active_fit_skips_repeated_interface_coordinates():
    sensors, values = sensor_line(3)
    off = sensors + [0.125, 0.0]
    fit = active_fit(IFACE, np.vstack([sensors, off]), np.concatenate([values, values + 0.1]),
                     np.column_stack([np.ones(33), np.linspace(0, 1, 33)]), delta_tol=1e-30, noise_std=0.01)
    assert sorted(fit.used) == [0, 1, 2]


def test_interface_csv_and_history(tmp_path):
    s = np.linspace(0, 1, 5)
    write_interface_csv(tmp_path / "i.csv", s, s ** 2, s / 10)
    assert (tmp_path / "i.csv").read_text().splitlines()[0] == "s,mu,var"
    a, b, c = read_interface_csv(tmp_path / "i.csv")
    assert np.array_equal(a, s) and np.array_equal(b, s ** 2) and np.array_equal(c, s / 10)
    sensors, values = sensor_line()
    fit = active_fit(IFACE, sensors, values, np.column_stack([np.ones(5), s]), delta_tol=1e-3)
    fit.history_json(tmp_path / "h.json")
    h = json.loads((tmp_path / "h.json").read_text())
    assert h["used"] == fit.used and len(h["history"]) == len(fit.used)
