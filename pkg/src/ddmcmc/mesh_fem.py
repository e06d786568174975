"""Bilinear (Q1) finite elements for -div(a grad u) = f on a uniform rectangle.

Node ordering is fixed throughout the package: node ``k = ix * ny + iy``, i.e.
y runs fastest. With this ordering the stiffness matrix has upper bandwidth
``ny + 1`` and is factorized with a banded Cholesky.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Union

import numpy as np
from scipy.linalg import solveh_banded

from . import kernels
from .errors import (
    EdgeOffGrid,
    NonPositivePermeability,
    SensorOffGrid,
    SingularSystem,
    Unsupported,
    ValidationError,
)

EDGES = ("left", "right", "bottom", "top")
GAUSS = 1.0 / np.sqrt(3.0)
# reference coordinates of the four element nodes and Gauss points, both
# counter-clockwise from the lower-left corner
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])
_QXI = GAUSS * _XI
_QETA = GAUSS * _ETA

# shape function values: _PHI[q, a] = phi_a at Gauss point q
_PHI = 0.25 * (1 + np.outer(_QXI, _XI)) * (1 + np.outer(_QETA, _ETA))


@dataclass(frozen=True)
class Grid2D:
    """Uniform tensor grid on ``x_range x y_range`` with ``nx * ny`` nodes."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    nx: int
    ny: int

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if self.nx < 2 or self.ny < 2:
            raise ValidationError("grid needs at least 2 nodes per axis")
        if self.hx <= 0 or self.hy <= 0:
            raise ValidationError("grid ranges must be increasing")

    @property
    def hx(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / (self.ny - 1)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def n_elements(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    @cached_property
    def xs(self) -> np.ndarray:
        return self.x_range[0] + self.hx * np.arange(self.nx)

    @cached_property
    def ys(self) -> np.ndarray:
        return self.y_range[0] + self.hy * np.arange(self.ny)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, 2)``, in node order."""
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def node_index(self, ix, iy):
        return np.asarray(ix) * self.ny + np.asarray(iy)

    def node_ij(self, k):
        k = np.asarray(k)
        return k // self.ny, k % self.ny

    @cached_property
    def connectivity(self) -> np.ndarray:
        """Element node indices, shape ``(n_elements, 4)``, counter-clockwise."""
        ex, ey = np.meshgrid(np.arange(self.nx - 1), np.arange(self.ny - 1), indexing="ij")
        ex, ey = ex.ravel(), ey.ravel()
        n0 = self.node_index(ex, ey)
        return np.column_stack([n0, n0 + self.ny, n0 + self.ny + 1, n0 + 1]).astype(np.int64)

    @cached_property
    def gauss_points(self) -> np.ndarray:
        """2x2 Gauss points per element, shape ``(n_elements * 4, 2)``."""
        conn = self.connectivity
        lower_left = self.coords[conn[:, 0]]
        cx = lower_left[:, 0:1] + 0.5 * self.hx * (1 + _QXI[None, :])
        cy = lower_left[:, 1:2] + 0.5 * self.hy * (1 + _QETA[None, :])
        return np.column_stack([cx.ravel(), cy.ravel()])

    def locate(self, points, tol: float = 1e-12) -> np.ndarray:
        """Node indices of ``points``; raises SensorOffGrid if any is not a node."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fx = (pts[:, 0] - self.x_range[0]) / self.hx
        fy = (pts[:, 1] - self.y_range[0]) / self.hy
        ix = np.rint(fx).astype(np.int64)
        iy = np.rint(fy).astype(np.int64)
        bad = (
            (np.abs(fx - ix) > tol)
            | (np.abs(fy - iy) > tol)
            | (ix < 0) | (ix >= self.nx) | (iy < 0) | (iy >= self.ny)
        )
        if bad.any():
            p = pts[np.argmax(bad)]
            raise SensorOffGrid(f"point ({p[0]:g}, {p[1]:g}) is not a grid node")
        return self.node_index(ix, iy)

    def edge_nodes(self, edge: str) -> np.ndarray:
        """Node indices along a boundary edge, ordered by increasing coordinate."""
        if edge == "left":
            return self.node_index(0, np.arange(self.ny))
        if edge == "right":
            return self.node_index(self.nx - 1, np.arange(self.ny))
        if edge == "bottom":
            return self.node_index(np.arange(self.nx), 0)
        if edge == "top":
            return self.node_index(np.arange(self.nx), self.ny - 1)
        raise ValidationError(f"unknown edge {edge!r}")

    def segment_nodes(self, start, end) -> np.ndarray:
        """Node indices on an axis-aligned segment, ordered from ``start`` to ``end``."""
        (x0, y0), (x1, y1) = start, end
        tol = 1e-9
        if abs(x0 - x1) < tol * self.hx:
            fixed = (x0 - self.x_range[0]) / self.hx
            ix = int(round(fixed))
            if abs(fixed - ix) > tol or not 0 <= ix < self.nx:
                raise EdgeOffGrid(f"x = {x0:g} is not a grid line")
            a, b = sorted(((y0 - self.y_range[0]) / self.hy, (y1 - self.y_range[0]) / self.hy))
            lo, hi = int(round(a)), int(round(b))
            if abs(a - lo) > tol or abs(b - hi) > tol or lo < 0 or hi >= self.ny:
                raise EdgeOffGrid("segment endpoints are not grid nodes")
            idx = self.node_index(ix, np.arange(lo, hi + 1))
            return idx if y0 <= y1 else idx[::-1]
        if abs(y0 - y1) < tol * self.hy:
            fixed = (y0 - self.y_range[0]) / self.hy
            iy = int(round(fixed))
            if abs(fixed - iy) > tol or not 0 <= iy < self.ny:
                raise EdgeOffGrid(f"y = {y0:g} is not a grid line")
            a, b = sorted(((x0 - self.x_range[0]) / self.hx, (x1 - self.x_range[0]) / self.hx))
            lo, hi = int(round(a)), int(round(b))
            if abs(a - lo) > tol or abs(b - hi) > tol or lo < 0 or hi >= self.nx:
                raise EdgeOffGrid("segment endpoints are not grid nodes")
            idx = self.node_index(np.arange(lo, hi + 1), iy)
            return idx if x0 <= x1 else idx[::-1]
        raise EdgeOffGrid("segment is not axis aligned")

    def subgrid(self, x_range, y_range) -> tuple["Grid2D", np.ndarray]:
        """Grid on a node-aligned sub-rectangle and its nodes' global indices."""
        ix = self._aligned(x_range, self.x_range[0], self.hx, self.nx)
        iy = self._aligned(y_range, self.y_range[0], self.hy, self.ny)
        sub = Grid2D(x_range, y_range, ix[1] - ix[0] + 1, iy[1] - iy[0] + 1)
        IX, IY = np.meshgrid(np.arange(ix[0], ix[1] + 1), np.arange(iy[0], iy[1] + 1), indexing="ij")
        return sub, self.node_index(IX.ravel(), IY.ravel())

    @staticmethod
    def _aligned(rng, origin, h, n):
        out = []
        for v in rng:
            f = (v - origin) / h
            i = int(round(f))
            if abs(f - i) > 1e-9 or not 0 <= i < n:
                raise EdgeOffGrid(f"{v:g} is not on a grid line")
            out.append(i)
        return out

    def refined(self, factor: int) -> "Grid2D":
        return Grid2D(self.x_range, self.y_range, factor * (self.nx - 1) + 1, factor * (self.ny - 1) + 1)

    def trapezoid_weights(self) -> np.ndarray:
        """Composite trapezoidal weights for nodal integration over the grid."""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wx, wy).ravel()


@dataclass(frozen=True)
class Dirichlet:
    """Prescribed value on an edge: scalar, callable ``g(x, y)`` or nodal array.

    A nodal array lists one value per edge node ordered by increasing
    coordinate along the edge.
    """

    value: Union[float, Callable, np.ndarray] = 0.0

    def values_at(self, coords: np.ndarray) -> np.ndarray:
        v = self.value
        if callable(v):
            return np.asarray(v(coords[:, 0], coords[:, 1]), dtype=float) * np.ones(len(coords))
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0:
            return np.full(len(coords), float(arr))
        if arr.shape != (len(coords),):
            raise ValidationError(f"edge needs {len(coords)} Dirichlet values, got {arr.shape}")
        return arr


@dataclass(frozen=True)
class Neumann:
    """Flux condition; only the homogeneous case is supported."""

    flux: float = 0.0

    def __post_init__(self):
        if self.flux != 0.0:
            raise Unsupported("only homogeneous Neumann conditions are supported")


@dataclass(frozen=True)
class BoundarySpec:
    """One condition per edge. Left/right Dirichlet values win at shared corners."""

    left: Union[Dirichlet, Neumann] = field(default_factory=Dirichlet)
    right: Union[Dirichlet, Neumann] = field(default_factory=Dirichlet)
    bottom: Union[Dirichlet, Neumann] = field(default_factory=Neumann)
    top: Union[Dirichlet, Neumann] = field(default_factory=Neumann)

    def __post_init__(self):
        for name in EDGES:
            if not isinstance(getattr(self, name), (Dirichlet, Neumann)):
                raise ValidationError(f"edge {name!r} needs a Dirichlet or Neumann condition")

    def constrained(self, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
        """Sorted Dirichlet node indices and their values."""
        values = {}
        for name in ("bottom", "top", "left", "right"):
            cond = getattr(self, name)
            if isinstance(cond, Dirichlet):
                nodes = grid.edge_nodes(name)
                vals = cond.values_at(grid.coords[nodes])
                values.update(zip(nodes.tolist(), vals.tolist()))
        if not values:
            raise SingularSystem("no Dirichlet edge: the diffusion problem is singular")
        nodes = np.array(sorted(values), dtype=np.int64)
        return nodes, np.array([values[k] for k in nodes.tolist()])


@dataclass(frozen=True)
class GaussianSource:
    """f(x) = amplitude * exp(-|x - center|^2)."""

    center: tuple[float, float] = (1.5, 0.5)
    amplitude: float = 3.0

    def __call__(self, x, y):
        return self.amplitude * np.exp(-((x - self.center[0]) ** 2 + (y - self.center[1]) ** 2))


@dataclass(frozen=True)
class FemSolution:
    grid: Grid2D
    u: np.ndarray
    n_elements: int
    solve_time: float

    def reshape(self) -> np.ndarray:
        """Nodal values as an ``(nx, ny)`` array."""
        return self.u.reshape(self.grid.nx, self.grid.ny)


def _reference_gradients(hx, hy):
    """G[q, a, b] = w_q |J| grad(phi_a) . grad(phi_b) at Gauss point q."""
    dx = (2.0 / hx) * 0.25 * _XI[None, :] * (1 + np.outer(_QETA, _ETA))
    dy = (2.0 / hy) * 0.25 * _ETA[None, :] * (1 + np.outer(_QXI, _XI))
    jac = 0.25 * hx * hy
    return np.ascontiguousarray(
        jac * (dx[:, :, None] * dx[:, None, :] + dy[:, :, None] * dy[:, None, :])
    )


class DiffusionProblem:
    """Grid, boundary conditions and source fixed; solve for many permeabilities.

    Everything independent of the permeability (connectivity, Gauss points,
    Dirichlet lifting data, load vector) is built once here, so a solve costs
    one kernel assembly plus one banded Cholesky factorization.
    """

    def __init__(self, grid: Grid2D, bc: BoundarySpec, source=None, backend=None):
        self.grid = grid
        self.bc = bc
        self.source = source
        self._kern = kernels if backend is None else kernels.get_backend(backend)
        self._G = _reference_gradients(grid.hx, grid.hy)
        self._conn = grid.connectivity
        self._u = grid.ny + 1
        self.dirichlet_nodes, self.dirichlet_values = bc.constrained(grid)
        self._load = self._assemble_load(source)

    def _assemble_load(self, source):
        g = self.grid
        if source is None:
            return np.zeros(g.n_nodes)
        gp = g.gauss_points
        fq = np.asarray(source(gp[:, 0], gp[:, 1]), dtype=float) * np.ones(len(gp))
        if not np.all(np.isfinite(fq)):
            raise ValidationError("source is not finite at every quadrature point")
        jac = 0.25 * g.hx * g.hy
        fe = jac * fq.reshape(-1, 4) @ _PHI
        return np.bincount(self._conn.ravel(), weights=fe.ravel(), minlength=g.n_nodes)

    def permeability_at_gauss(self, perm) -> np.ndarray:
        """Permeability at Gauss points, shape ``(n_elements, 4)``.

        ``perm`` may be a callable ``a(x, y)``, nodal values (length
        ``n_nodes``, interpolated bilinearly) or Gauss values.
        """
        g = self.grid
        if callable(perm):
            gp = g.gauss_points
            kq = np.asarray(perm(gp[:, 0], gp[:, 1]), dtype=float) * np.ones(len(gp))
            return kq.reshape(-1, 4)
        arr = np.asarray(perm, dtype=float)
        if arr.ndim == 0:
            return np.full((g.n_elements, 4), float(arr))
        if arr.shape == (g.n_nodes,):
            return arr[self._conn] @ _PHI.T
        if arr.size == 4 * g.n_elements:
            return arr.reshape(-1, 4)
        raise ValidationError(f"permeability of shape {arr.shape} does not match the grid")

    def solve(self, perm, verify: bool = False) -> FemSolution:
        t0 = time.perf_counter()
        kq = np.ascontiguousarray(self.permeability_at_gauss(perm))
        if not np.all(kq > 0):
            bad = np.flatnonzero(~(kq.ravel() > 0))[0]
            x, y = self.grid.gauss_points[bad]
            raise NonPositivePermeability(
                f"permeability {kq.ravel()[bad]:g} at quadrature point ({x:.6g}, {y:.6g})"
            )
        ab = self._kern.assemble_band(kq, self._G, self._conn, self.grid.n_nodes, self._u)
        if verify:
            full = ab.copy()
        rhs = self._load.copy()
        self._kern.apply_dirichlet(ab, rhs, self.dirichlet_nodes, self.dirichlet_values)
        u = solveh_banded(ab, rhs, check_finite=False)
        if verify:
            self._verify(full, u)
        return FemSolution(self.grid, u, self.grid.n_elements, time.perf_counter() - t0)

    def _verify(self, full_band, u, rtol=1e-10):
        free = np.ones(self.grid.n_nodes, dtype=bool)
        free[self.dirichlet_nodes] = False
        r = self._kern.band_matvec(full_band, u) - self._load
        # componentwise scale |A||u| + |f| keeps the test meaningful when A u ~ f ~ 0
        scale = np.linalg.norm(self._kern.band_matvec(np.abs(full_band), np.abs(u))[free]) + np.linalg.norm(
            self._load[free])
        if np.linalg.norm(r[free]) > rtol * max(scale, 1e-300):
            raise SingularSystem("linear solve did not reach the residual tolerance")
        if not np.array_equal(u[self.dirichlet_nodes], self.dirichlet_values):
            raise SingularSystem("Dirichlet values not reproduced exactly")


def assemble_and_solve(grid: Grid2D, perm, bc: BoundarySpec, src=None, verify: bool = True) -> FemSolution:
    """One-shot solve of -div(a grad u) = f with the given boundary conditions."""
    return DiffusionProblem(grid, bc, src).solve(perm, verify=verify)


def observe(sol: FemSolution, sensors) -> np.ndarray:
    """Solution values at sensor locations (each must be a grid node)."""
    return sol.u[sol.grid.locate(sensors)]


def restrict_solution(sol: FemSolution, grid: Grid2D, edge) -> tuple[np.ndarray, np.ndarray]:
    """Trace of the solution on a grid-aligned segment ``(start, end)``.

    Returns node coordinates and values ordered by arclength from ``start``.
    """
    idx = grid.segment_nodes(*edge)
    return grid.coords[idx], sol.u[idx]


def write_nodal_csv(path, grid: Grid2D, values) -> None:
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_nodes,):
        raise ValidationError("nodal field does not match the grid")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(grid.coords, values):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_nodal_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2]
