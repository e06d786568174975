"""Global fields reconstructed from per-subdomain KL coefficients.

Two reconstructions are provided. The *stitched* field evaluates each local
expansion on its own subdomain. The *assembled* field projects the stitched
field onto the global KL modes, which needs the coupling integrals
``<psi_r^(i) extended by zero, psi_t>`` computed once per partition.

Inner products involving a stitched field are taken piecewise (sum of the
subdomain trapezoidal integrals). On a node-aligned partition this is the same
rule as the global trapezoid for continuous fields, and it lets the projection
identities hold to rounding error despite the jumps on interfaces.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .covariance_kl import KLBasis, Rect
from .errors import BasisMismatch, EmptySampleSet, ValidationError
from .mesh_fem import Grid2D

log = logging.getLogger(__name__)

PERMEABILITY_FLOOR = 1e-6


@dataclass(frozen=True)
class Interface:
    i: int
    j: int
    start: tuple[float, float]
    end: tuple[float, float]

    @property
    def key(self) -> str:
        return f"{self.i + 1}_{self.j + 1}"

    @property
    def length(self) -> float:
        return float(np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]))

    def arclength(self, points) -> np.ndarray:
        """Coordinate of the projection of ``points`` onto the interface line."""
        pts = np.atleast_2d(points)
        d = np.subtract(self.end, self.start) / self.length
        return (pts - np.asarray(self.start)) @ d


@dataclass(frozen=True)
class Partition:
    """Axis-aligned, non-overlapping rectangles covering ``domain``."""

    domain: Rect
    subdomains: tuple[Rect, ...]
    interfaces: tuple[Interface, ...] = field(default=())

    @classmethod
    def from_rects(cls, domain: Rect, rects: Sequence[Rect]) -> "Partition":
        rects = tuple(((float(a), float(b)), (float(c), float(e))) for (a, b), (c, e) in rects)
        (X0, X1), (Y0, Y1) = domain
        tol = 1e-12 * max(X1 - X0, Y1 - Y0)
        area = 0.0
        for (x0, x1), (y0, y1) in rects:
            if x1 - x0 <= tol or y1 - y0 <= tol:
                raise ValidationError("subdomains need positive area")
            if x0 < X0 - tol or x1 > X1 + tol or y0 < Y0 - tol or y1 > Y1 + tol:
                raise ValidationError("subdomain extends beyond the domain")
            area += (x1 - x0) * (y1 - y0)
        for a, b in itertools.combinations(rects, 2):
            ox = min(a[0][1], b[0][1]) - max(a[0][0], b[0][0])
            oy = min(a[1][1], b[1][1]) - max(a[1][0], b[1][0])
            if ox > tol and oy > tol:
                raise ValidationError("subdomains overlap")
        if abs(area - (X1 - X0) * (Y1 - Y0)) > 1e-9 * (X1 - X0) * (Y1 - Y0):
            raise ValidationError("subdomains do not cover the domain")
        return cls(((X0, X1), (Y0, Y1)), rects, tuple(_find_interfaces(rects, tol)))

    @classmethod
    def strips(cls, domain: Rect, m: int) -> "Partition":
        """``m`` equal-width vertical strips."""
        (X0, X1), y = domain
        edges = np.linspace(X0, X1, m + 1)
        return cls.from_rects(domain, [((edges[k], edges[k + 1]), y) for k in range(m)])

    @property
    def m(self) -> int:
        return len(self.subdomains)

    def subgrids(self, grid: Grid2D) -> list[tuple[Grid2D, np.ndarray]]:
        return [grid.subgrid(*rect) for rect in self.subdomains]

    def contains(self, i: int, points, tol: float = 1e-9) -> np.ndarray:
        """Closure membership of points in subdomain ``i``."""
        (x0, x1), (y0, y1) = self.subdomains[i]
        p = np.atleast_2d(points)
        return (p[:, 0] >= x0 - tol) & (p[:, 0] <= x1 + tol) & (p[:, 1] >= y0 - tol) & (p[:, 1] <= y1 + tol)


def _find_interfaces(rects, tol):
    out = []
    for i, j in itertools.combinations(range(len(rects)), 2):
        (ax0, ax1), (ay0, ay1) = rects[i]
        (bx0, bx1), (by0, by1) = rects[j]
        for xa, xb in ((ax1, bx0), (ax0, bx1)):
            if abs(xa - xb) <= tol:
                lo, hi = max(ay0, by0), min(ay1, by1)
                if hi - lo > tol:
                    out.append(Interface(i, j, (xa, lo), (xa, hi)))
        for ya, yb in ((ay1, by0), (ay0, by1)):
            if abs(ya - yb) <= tol:
                lo, hi = max(ax0, bx0), min(ax1, bx1)
                if hi - lo > tol:
                    out.append(Interface(i, j, (lo, ya), (hi, ya)))
    return out


@dataclass(frozen=True)
class CouplingMatrix:
    """Blocks ``C_i[t, r] = <psi_r^(i), psi_t>_{D^(i)}`` and the scaled maps.

    ``maps[i] = diag(1/sqrt(lambda)) C_i diag(sqrt(lambda^(i)))`` so that the
    assembled coefficients are ``sum_i maps[i] @ xi^(i)``.
    """

    blocks: tuple[np.ndarray, ...]
    maps: tuple[np.ndarray, ...]

    def full(self) -> np.ndarray:
        return np.hstack(self.blocks)


def _simpson_1d(n, h):
    if (n - 1) % 2:
        raise ValidationError("Simpson's rule needs an even number of intervals")
    w = np.ones(n)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return w * h / 3


def _weights(grid: Grid2D, quadrature: str) -> np.ndarray:
    if quadrature == "trapezoid":
        return grid.trapezoid_weights()
    if quadrature == "simpson":
        return np.outer(_simpson_1d(grid.nx, grid.hx), _simpson_1d(grid.ny, grid.hy)).ravel()
    raise ValidationError(f"unknown quadrature {quadrature!r}")


def _check_bases(partition, global_basis, local_bases, global_grid):
    if len(local_bases) != partition.m:
        raise BasisMismatch("one local basis per subdomain is required")
    subgrids = partition.subgrids(global_grid)
    for (sub, _), lb in zip(subgrids, local_bases):
        if not lb.spec.same_as(global_basis.spec):
            raise BasisMismatch("local and global bases use different covariance specs")
        if lb.grid != sub:
            raise BasisMismatch("local basis grid is not the subdomain grid")
    return subgrids


def coupling_matrix(partition: Partition, global_basis: KLBasis, local_bases: Sequence[KLBasis],
                    quadrature: str = "trapezoid") -> CouplingMatrix:
    gg = global_basis.grid
    subgrids = _check_bases(partition, global_basis, local_bases, gg)
    blocks, maps = [], []
    sq = np.sqrt(global_basis.eigvals)
    for (sub, idx), lb in zip(subgrids, local_bases):
        w = _weights(sub, quadrature)
        C = global_basis.nodal_modes[idx].T @ (w[:, None] * lb.nodal_modes)
        blocks.append(C)
        maps.append(C * np.sqrt(lb.eigvals)[None, :] / sq[:, None])
    return CouplingMatrix(tuple(blocks), tuple(maps))


@dataclass(frozen=True)
class StitchedField:
    """Per-subdomain nodal pieces plus a global nodal view.

    On nodes shared by several subdomains the global view takes the value of
    the lowest-index subdomain; ``max_jump`` records the largest disagreement.
    """

    grid: Grid2D
    pieces: tuple[np.ndarray, ...]
    node_index: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    values: np.ndarray
    max_jump: float

    def inner(self, g_nodal: np.ndarray) -> float:
        return float(sum(np.dot(w * p, g_nodal[idx]) for p, idx, w in zip(self.pieces, self.node_index, self.weights)))

    def distance(self, g_nodal: np.ndarray) -> float:
        """Piecewise L2 distance to a global nodal field."""
        return float(np.sqrt(sum(np.dot(w, (p - g_nodal[idx]) ** 2) for p, idx, w in zip(self.pieces, self.node_index, self.weights))))


def stitch(local_row: Sequence[np.ndarray], partition: Partition, local_bases: Sequence[KLBasis],
           grid: Grid2D) -> StitchedField:
    if len(local_row) != partition.m or len(local_bases) != partition.m:
        raise ValidationError("need one coefficient vector and basis per subdomain")
    values = np.full(grid.n_nodes, np.nan)
    pieces, idxs, ws = [], [], []
    max_jump = 0.0
    for (sub, idx), lb, xi in zip(partition.subgrids(grid), local_bases, local_row):
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (lb.d,):
            raise ValidationError(f"subdomain coefficients have shape {xi.shape}, basis needs {lb.d}")
        piece = lb.spec.mean_at(sub.coords) + lb.nodal_modes @ (np.sqrt(lb.eigvals) * xi)
        seen = ~np.isnan(values[idx])
        if seen.any():
            max_jump = max(max_jump, float(np.abs(values[idx][seen] - piece[seen]).max()))
        fresh = idx[~seen]
        values[fresh] = piece[~seen]
        pieces.append(piece)
        idxs.append(idx)
        ws.append(sub.trapezoid_weights())
    return StitchedField(grid, tuple(pieces), tuple(idxs), tuple(ws), values, max_jump)


@dataclass(frozen=True)
class AssembledSample:
    basis: KLBasis
    xi_hat: np.ndarray

    def nodal(self) -> np.ndarray:
        b = self.basis
        return b.spec.mean_at(b.grid.coords) + b.nodal_modes @ (np.sqrt(b.eigvals) * self.xi_hat)


def assemble(local_row: Sequence[np.ndarray], coupling: CouplingMatrix, global_basis: KLBasis) -> AssembledSample:
    """Global KL coefficients of the projection of the stitched field."""
    if len(local_row) != len(coupling.maps):
        raise ValidationError("local row does not match the coupling matrix")
    xi_hat = sum(A @ np.asarray(x, dtype=float) for A, x in zip(coupling.maps, local_row))
    return AssembledSample(global_basis, np.asarray(xi_hat))


def assemble_many(local_samples: Sequence[np.ndarray], coupling: CouplingMatrix) -> np.ndarray:
    """Vectorised :func:`assemble` over sample rows; each input is ``(N, d_i)``."""
    n = {len(s) for s in local_samples}
    if len(n) != 1:
        raise ValidationError("all subdomains must carry the same number of samples")
    return sum(np.asarray(s) @ A.T for A, s in zip(coupling.maps, local_samples))


def posterior_moments(samples) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise sample mean and population (1/N) variance."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or len(s) < 2:
        raise EmptySampleSet("at least two field samples are required")
    # centre on the first sample so identical samples give exactly zero variance
    dev = s - s[0]
    m = dev.mean(axis=0)
    return s[0] + m, ((dev - m) ** 2).mean(axis=0)


def clamp_positive(values, floor: float = PERMEABILITY_FLOOR) -> tuple[np.ndarray, int]:
    """Clamp permeability values below ``floor``; returns the values and the clamp count."""
    v = np.asarray(values, dtype=float)
    low = v < floor
    n = int(low.sum())
    if n:
        log.warning("clamped %d permeability values below %g", n, floor)
        v = np.where(low, floor, v)
    return v, n


def write_coefficients_csv(path, xi: np.ndarray) -> None:
    xi = np.atleast_2d(xi)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index"] + [f"xi_{k + 1}" for k in range(xi.shape[1])])
        for s, row in enumerate(xi):
            w.writerow([s] + [repr(float(v)) for v in row])
