"""Karhunen-Loeve bases for the separable exponential covariance on rectangles.

The 1D kernel ``exp(-|s - t| / L)`` on ``[0, a]`` has closed-form eigenpairs
(cos/sin modes about the interval centre whose frequencies solve a
transcendental equation). 2D eigenpairs on a rectangle are products of the
per-axis ones scaled by ``sigma**2``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import bisect

from .errors import (
    PointOutsideDomain,
    QuadratureGridMismatch,
    RootBracketFailure,
    TruncationOverflow,
    ValidationError,
)
from .mesh_fem import Grid2D

Rect = tuple[tuple[float, float], tuple[float, float]]


@dataclass(frozen=True)
class CovarianceSpec:
    sigma: float = 0.25
    corr_len: float = 2.0
    mean: Union[float, Callable] = 1.0

    def __post_init__(self):
        if not self.sigma > 0 or not self.corr_len > 0:
            raise ValidationError("sigma and corr_len must be positive")

    def mean_at(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        if callable(self.mean):
            return np.asarray(self.mean(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))
        return np.full(len(pts), float(self.mean))

    def same_as(self, other: "CovarianceSpec") -> bool:
        return (self.sigma, self.corr_len) == (other.sigma, other.corr_len) and (
            self.mean is other.mean or self.mean == other.mean
        )


@dataclass(frozen=True)
class Modes1D:
    """The first ``m`` analytic eigenpairs of the exponential kernel on ``[0, length]``."""

    length: float
    corr_len: float
    omega: np.ndarray
    eigvals: np.ndarray
    even: np.ndarray
    norm: np.ndarray

    def __len__(self):
        return len(self.eigvals)

    def __call__(self, s, which=None) -> np.ndarray:
        """Mode values at ``s`` (local coordinate in ``[0, length]``), shape ``(len(s), m)``."""
        idx = slice(None) if which is None else which
        t = np.asarray(s, dtype=float)[:, None] - 0.5 * self.length
        arg = t * self.omega[idx][None, :]
        vals = np.where(self.even[idx][None, :], np.cos(arg), np.sin(arg))
        return vals / self.norm[idx][None, :]


def _bisect_root(f, lo, hi, index, tol=1e-13):
    try:
        return bisect(f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=200)
    except (ValueError, RuntimeError) as exc:
        raise RootBracketFailure(index, f"root bracket {index} failed: {exc}") from exc


def eigenpairs_1d(corr_len: float, length: float, count: int) -> Modes1D:
    """Largest ``count`` eigenpairs of ``exp(-|s-t|/corr_len)`` on ``[0, length]``.

    Frequency ``r`` lies in ``((r-1) pi / length, r pi / length)``; odd ``r``
    gives an even (cosine) mode, even ``r`` a sine mode. Modes are L2
    normalised on the interval.
    """
    if count < 1 or not length > 0 or not corr_len > 0:
        raise ValidationError("need count >= 1, length > 0, corr_len > 0")
    c = 1.0 / corr_len
    half = 0.5 * length
    omega = np.empty(count)
    even = np.zeros(count, dtype=bool)
    for r in range(1, count + 1):
        lo, hi = (r - 1) * np.pi / length, r * np.pi / length
        if r % 2:
            f = lambda w: c * np.cos(w * half) - w * np.sin(w * half)
        else:
            f = lambda w: w * np.cos(w * half) + c * np.sin(w * half)
        omega[r - 1] = _bisect_root(f, lo, hi, r)
        even[r - 1] = bool(r % 2)
    eigvals = 2.0 * c / (omega**2 + c**2)
    s2 = np.sin(2 * omega * half) / (2 * omega)
    norm = np.sqrt(np.where(even, half + s2, half - s2))
    return Modes1D(length, corr_len, omega, eigvals, even, norm)


def _captured_products(lx, ly, area_var, sigma2):
    lam = sigma2 * np.outer(lx, ly).ravel()
    ii, jj = np.divmod(np.arange(lam.size), len(ly))
    # descending eigenvalue, ties broken by (i, j) lexicographically
    order = np.lexsort((jj, ii, -lam))
    return lam[order], ii[order], jj[order]


@dataclass(eq=False)
class KLBasis:
    """Truncated KL basis on a rectangle, tied to the grid used for quadrature.

    The analytic product modes are orthonormalised once against the grid's
    trapezoidal inner product (symmetric/Lowdin transform), so the discrete
    Gram matrix is the identity; ``transform`` maps raw product modes to the
    stored ones and is also used for off-grid evaluation.
    """

    spec: CovarianceSpec
    domain: Rect
    grid: Grid2D
    eigvals: np.ndarray
    pairs: np.ndarray
    modes_x: Modes1D
    modes_y: Modes1D
    captured: float
    transform: np.ndarray
    weights: np.ndarray = field(repr=False)
    nodal_modes: np.ndarray = field(repr=False)

    @property
    def d(self) -> int:
        return len(self.eigvals)

    @property
    def area(self) -> float:
        (x0, x1), (y0, y1) = self.domain
        return (x1 - x0) * (y1 - y0)

    def _raw(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        (x0, _), (y0, _) = self.domain
        nx = self.pairs[:, 0].max() + 1
        ny = self.pairs[:, 1].max() + 1
        px = self.modes_x(pts[:, 0] - x0, slice(0, nx))
        py = self.modes_y(pts[:, 1] - y0, slice(0, ny))
        return px[:, self.pairs[:, 0]] * py[:, self.pairs[:, 1]]

    def modes_at(self, points, check: bool = True) -> np.ndarray:
        """Eigenfunction values, shape ``(len(points), d)``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if check:
            (x0, x1), (y0, y1) = self.domain
            tol = 1e-9 * max(x1 - x0, y1 - y0)
            out = (pts[:, 0] < x0 - tol) | (pts[:, 0] > x1 + tol) | (pts[:, 1] < y0 - tol) | (pts[:, 1] > y1 + tol)
            if out.any():
                p = pts[np.argmax(out)]
                raise PointOutsideDomain(f"point ({p[0]:g}, {p[1]:g}) is outside {self.domain}")
        return self._raw(pts) @ self.transform

    def gram(self) -> np.ndarray:
        P = self.nodal_modes
        return P.T @ (self.weights[:, None] * P)

    def captured_fraction(self, d: Optional[int] = None) -> float:
        d = self.d if d is None else d
        return float(self.eigvals[:d].sum() / (self.area * self.spec.sigma**2))

    def summary(self) -> dict:
        return {
            "domain": [list(self.domain[0]), list(self.domain[1])],
            "L": self.spec.corr_len,
            "sigma": self.spec.sigma,
            "d": self.d,
            "eigvals": self.eigvals.tolist(),
            "captured": self.captured,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _select_modes(spec, lx_len, ly_len, delta_kl, cap):
    """Adaptively grow per-axis mode counts until the top-d products are certain."""
    area_var = lx_len * ly_len * spec.sigma**2
    m = 16
    while True:
        mx = eigenpairs_1d(spec.corr_len, lx_len, m + 1)
        my = eigenpairs_1d(spec.corr_len, ly_len, m + 1)
        lam, ii, jj = _captured_products(mx.eigvals[:m], my.eigvals[:m], area_var, spec.sigma**2)
        frac = np.cumsum(lam) / area_var
        hit = np.flatnonzero(frac > delta_kl)
        if len(hit):
            d = hit[0] + 1
            if d > cap:
                raise TruncationOverflow(f"{d} modes needed for delta_kl={delta_kl}, cap is {cap}")
            # any product with an index >= m is bounded by this
            missing = spec.sigma**2 * max(mx.eigvals[m] * my.eigvals[0], mx.eigvals[0] * my.eigvals[m])
            if lam[d - 1] > missing:
                return mx, my, lam[:d], np.column_stack([ii[:d], jj[:d]]), float(frac[d - 1])
        elif m * m > 4 * cap:
            raise TruncationOverflow(f"more than {cap} modes needed for delta_kl={delta_kl}")
        m *= 2


def build_basis(
    spec: CovarianceSpec,
    domain: Rect,
    delta_kl: float = 0.95,
    grid: Optional[Grid2D] = None,
    cap: int = 2048,
    grid_spacing: Optional[float] = None,
) -> KLBasis:
    """Truncated KL basis capturing more than ``delta_kl`` of the variance.

    ``grid`` is the working quadrature grid on ``domain``; by default a grid
    with spacing ``grid_spacing`` (1/32) is used.
    """
    if not 0 < delta_kl < 1:
        raise ValidationError("delta_kl must lie in (0, 1)")
    (x0, x1), (y0, y1) = domain = ((float(domain[0][0]), float(domain[0][1])), (float(domain[1][0]), float(domain[1][1])))
    if grid is None:
        h = grid_spacing or 1.0 / 32
        grid = Grid2D((x0, x1), (y0, y1), int(round((x1 - x0) / h)) + 1, int(round((y1 - y0) / h)) + 1)
    elif not (np.allclose(grid.x_range, (x0, x1)) and np.allclose(grid.y_range, (y0, y1))):
        raise QuadratureGridMismatch("working grid does not cover the basis domain")

    mx, my, lam, pairs, captured = _select_modes(spec, x1 - x0, y1 - y0, delta_kl, cap)
    w = grid.trapezoid_weights()
    basis = KLBasis(spec, domain, grid, lam, pairs, mx, my, captured,
                    np.eye(len(lam)), w, np.empty((0, 0)))
    raw = basis._raw(grid.coords)
    gram = raw.T @ (w[:, None] * raw)
    evals, evecs = np.linalg.eigh(gram)
    if evals.min() <= 1e-8 * evals.max():
        raise QuadratureGridMismatch(f"grid {grid.nx}x{grid.ny} is too coarse to resolve {len(lam)} KL modes")
    basis.transform = (evecs / np.sqrt(evals)) @ evecs.T
    basis.nodal_modes = raw @ basis.transform
    return basis


@dataclass(frozen=True)
class FieldSample:
    basis: KLBasis
    xi: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (self.basis.d,):
            raise ValidationError(f"expected {self.basis.d} coefficients, got {xi.shape}")
        object.__setattr__(self, "xi", xi)

    def nodal(self) -> np.ndarray:
        b = self.basis
        return b.spec.mean_at(b.grid.coords) + b.nodal_modes @ (np.sqrt(b.eigvals) * self.xi)


def evaluate_field(sample: FieldSample, points) -> np.ndarray:
    """a0(x) + sum_r sqrt(lambda_r) psi_r(x) xi_r at each point."""
    b = sample.basis
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return b.spec.mean_at(pts) + b.modes_at(pts) @ (np.sqrt(b.eigvals) * sample.xi)


def extract_local_coeffs(field_values, local_basis: KLBasis) -> np.ndarray:
    """Project a field onto a (local) KL basis by trapezoidal quadrature.

    ``field_values`` is either nodal values on the basis's working grid or a
    callable ``a(x, y)`` evaluated at those nodes.
    """
    b = local_basis
    coords = b.grid.coords
    if callable(field_values):
        vals = np.asarray(field_values(coords[:, 0], coords[:, 1]), dtype=float) * np.ones(len(coords))
    else:
        vals = np.asarray(field_values, dtype=float)
        if vals.shape != (len(coords),):
            raise QuadratureGridMismatch(
                f"field has {vals.shape} values, basis grid has {len(coords)} nodes"
            )
    centred = vals - b.spec.mean_at(coords)
    return (b.nodal_modes.T @ (b.weights * centred)) / np.sqrt(b.eigvals)
