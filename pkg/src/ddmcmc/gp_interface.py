"""Squared-exponential GP regression for interface traces with active sensor selection.

Inputs are scalar coordinates along the interface (arclength from its start).
The GP has zero prior mean; when all training targets coincide the model
switches to a constant offset with a floored signal std, and reports it.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .errors import FactorizationFailure, PoolExhausted, ValidationError

log = logging.getLogger(__name__)

NUGGETS = (0.0, 1e-10, 1e-8, 1e-6)
SIGMA_FLOOR = 1e-8
GRID_SIZE = 20
MAX_EVALS = 200


@dataclass(frozen=True)
class GPHyper:
    sigma_f: float
    length_scale: float
    noise_std: float = 0.0

    def __post_init__(self):
        if not (self.sigma_f > 0 and self.length_scale > 0 and self.noise_std >= 0):
            raise ValidationError(f"invalid GP hyperparameters {self}")


def se_kernel(a, b, hyper: GPHyper) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    r2 = (a[:, None] - b[None, :]) ** 2
    return hyper.sigma_f ** 2 * np.exp(-0.5 * r2 / hyper.length_scale ** 2)


def _factor(x, hyper):
    K = se_kernel(x, x, hyper)
    K[np.diag_indices_from(K)] += hyper.noise_std ** 2
    for nug in NUGGETS:
        try:
            L = linalg.cholesky(K + nug * hyper.sigma_f ** 2 * np.eye(len(x)), lower=True)
        except linalg.LinAlgError:
            continue
        return L, nug
    raise FactorizationFailure(f"covariance not positive definite after nugget {NUGGETS[-1]:g}")


def nlml(hyper: GPHyper, x, y) -> float:
    """Negative log marginal likelihood of targets ``y`` at inputs ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(x) < 1 or len(x) != len(y):
        raise ValidationError("nlml needs matching, non-empty inputs and targets")
    L, _ = _factor(x, hyper)
    alpha = linalg.cho_solve((L, True), y)
    return float(np.log(np.diag(L)).sum() + 0.5 * y @ alpha + 0.5 * len(x) * np.log(2 * np.pi))


@dataclass(frozen=True)
class HyperFit:
    hyper: GPHyper
    nlml: float
    grid_min: float
    degenerate: bool = False


def _search_box(y, length):
    scale = float(np.std(y))
    if scale == 0.0:
        scale = float(np.sqrt(np.mean(y ** 2)))
    return np.log(scale * 1e-3), np.log(scale * 1e3), np.log(length * 1e-2), np.log(length * 1e1)


def fit_hyper(x, y, length: float = 1.0, noise_std: float = 0.0) -> HyperFit:
    """Grid search over log(sigma_f), log(l_f) followed by a Nelder-Mead polish.

    Both stages stay inside the search box; sigma_f spans 1e-3..1e3 times the
    target spread and l_f spans 1e-2..1e1 times ``length``.
    The returned nlml never exceeds the grid minimum.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(x) < 2:
        raise ValidationError("fit_hyper needs at least two training points")
    if np.ptp(y) == 0.0:
        h = GPHyper(SIGMA_FLOOR, 10.0 * length, noise_std)
        return HyperFit(h, float("nan"), float("nan"), degenerate=True)

    s0, s1, l0, l1 = _search_box(y, length)

    def f(p):
        try:
            return nlml(GPHyper(float(np.exp(p[0])), float(np.exp(p[1])), noise_std), x, y)
        except FactorizationFailure:
            return np.inf

    grid = [(a, b) for a in np.linspace(s0, s1, GRID_SIZE) for b in np.linspace(l0, l1, GRID_SIZE)]
    vals = np.array([f(p) for p in grid])
    k = int(np.argmin(vals))
    best_p, best_v = np.array(grid[k]), float(vals[k])
    if not np.isfinite(best_v):
        raise FactorizationFailure("nlml is not finite anywhere on the search grid")
    res = optimize.minimize(f, best_p, method="Nelder-Mead", bounds=[(s0, s1), (l0, l1)],
                            options={"maxfev": MAX_EVALS, "xatol": 1e-6, "fatol": 1e-10})
    p, v = (res.x, float(res.fun)) if res.fun < best_v else (best_p, best_v)
    return HyperFit(GPHyper(float(np.exp(p[0])), float(np.exp(p[1])), noise_std), v, float(vals[k]))


@dataclass(frozen=True, eq=False)
class GPModel:
    hyper: GPHyper
    x: np.ndarray
    y: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    nugget: float = 0.0
    offset: float = 0.0
    degenerate: bool = False

    @classmethod
    def train(cls, hyper: GPHyper, x, y, offset: float = 0.0, degenerate: bool = False) -> "GPModel":
        x = np.asarray(x, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(x) == 0 or len(x) != len(y):
            raise ValidationError("training inputs and targets must be non-empty and of equal length")
        L, nug = _factor(x, hyper)
        alpha = linalg.cho_solve((L, True), y - offset)
        return cls(hyper, x, y, L, alpha, nug, offset, degenerate)

    @property
    def n(self) -> int:
        return len(self.x)

    def predict(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float).reshape(-1)
        ks = se_kernel(self.x, s, self.hyper)
        mean = self.offset + ks.T @ self.alpha
        v = linalg.solve_triangular(self.chol, ks, lower=True)
        var = self.hyper.sigma_f ** 2 - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)


def predict(model: GPModel, s) -> tuple[np.ndarray, np.ndarray]:
    return model.predict(s)


def fit_model(x, y, length: float = 1.0, noise_std: float = 0.0) -> GPModel:
    """Fit hyperparameters and train. One point uses sigma_f = |y| and l_f = length."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(x) == 1:
        h = GPHyper(max(abs(float(y[0])), SIGMA_FLOOR), length, noise_std)
        return GPModel.train(h, x, y)
    fit = fit_hyper(x, y, length, noise_std)
    if fit.degenerate:
        log.warning("GP training targets are all equal; using a constant model")
        return GPModel.train(fit.hyper, x, y, offset=float(y[0]), degenerate=True)
    return GPModel.train(fit.hyper, x, y)


@dataclass
class ActiveFit:
    model: GPModel
    used: list[int]
    history: list[dict]
    sigma_max: float
    exhausted: bool = False

    def history_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"used": self.used, "history": self.history, "sigma_max": self.sigma_max,
                       "exhausted": self.exhausted,
                       "hyper": {"sigma_f": self.model.hyper.sigma_f,
                                 "length_scale": self.model.hyper.length_scale,
                                 "noise_std": self.model.hyper.noise_std}}, fh, indent=2)


def active_fit(interface, sensors, values, test_points, delta_tol: float = 1e-7,
               noise_std: float = 0.0, strict: bool = False) -> ActiveFit:
    """Grow the training set one sensor at a time until the max test variance < ``delta_tol``.

    ``interface`` supplies ``start``, ``end``, ``length`` and ``arclength``.
    Starts from the sensor nearest the interface midpoint; each step adds the
    unused sensor nearest to the test point of largest predictive variance.
    Sensors whose interface coordinate repeats a training input are skipped.
    """
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    values = np.asarray(values, dtype=float).reshape(-1)
    test_points = np.atleast_2d(np.asarray(test_points, dtype=float))
    if len(sensors) == 0 or len(sensors) != len(values):
        raise ValidationError("need a non-empty sensor set with one value per sensor")
    if len(test_points) == 0:
        raise ValidationError("test set is empty")
    s_all = interface.arclength(sensors)
    s_test = interface.arclength(test_points)
    length = interface.length
    mid = 0.5 * (np.asarray(interface.start) + np.asarray(interface.end))

    used = [int(np.argmin(np.linalg.norm(sensors - mid, axis=1)))]
    history = []
    exhausted = False
    while True:
        model = fit_model(s_all[used], values[used], length, noise_std)
        _, var = model.predict(s_test)
        k = int(np.argmax(var))
        sigma_max = float(var[k])
        history.append({"sensor": used[-1], "x": sensors[used[-1]].tolist(), "n": len(used), "sigma_max": sigma_max})
        if sigma_max < delta_tol:
            break
        taken = s_all[used]
        free = [c for c in range(len(sensors))
                if c not in used and np.min(np.abs(taken - s_all[c])) > 1e-12 * max(length, 1.0)]
        if not free:
            exhausted = True
            msg = f"sensor pool exhausted with max variance {sigma_max:.3e} >= {delta_tol:.3e}"
            if strict:
                raise PoolExhausted(msg)
            log.warning(msg)
            break
        free = np.array(free)
        dist = np.linalg.norm(sensors[free] - test_points[k], axis=1)
        used.append(int(free[np.argmin(dist)]))
    return ActiveFit(model, used, history, sigma_max, exhausted)


def relative_error(trace, mean) -> float:
    trace = np.asarray(trace, dtype=float)
    return float(np.linalg.norm(trace - np.asarray(mean)) / np.linalg.norm(trace))


def write_interface_csv(path, s, mean, var) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "mu", "var"])
        for row in zip(s, mean, var):
            w.writerow([repr(float(v)) for v in row])


def read_interface_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2]
