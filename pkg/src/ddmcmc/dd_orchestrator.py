"""Domain-decomposed MCMC: data split, interface fitting, local chains, assembly."""
from __future__ import annotations

import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import field_model as fm
from .covariance_kl import CovarianceSpec, KLBasis, build_basis
from .errors import MissingInterfaceModel, SensorOutsideDomain, Unsupported, ValidationError
from .gp_interface import ActiveFit, active_fit
from .mesh_fem import _PHI, BoundarySpec, Dirichlet, DiffusionProblem, Grid2D
from .mh_sampler import Chain, burn_in, run_chain, stream_rng

log = logging.getLogger(__name__)

LOCAL_STREAM0 = 10


@dataclass(frozen=True)
class SensorDataSet:
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if len(c) != len(v):
            raise ValidationError("one value per sensor is required")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def subset(self, idx) -> "SensorDataSet":
        return SensorDataSet(self.coords[idx], self.values[idx])


def lattice_sensors(nx: int = 23, ny: int = 7, spacing: float = 0.125) -> np.ndarray:
    """Sensors at ``(spacing * i, spacing * j)`` for ``i = 1..nx``, ``j = 1..ny``."""
    i, j = np.meshgrid(np.arange(1, nx + 1), np.arange(1, ny + 1), indexing="ij")
    return np.column_stack([spacing * i.ravel(), spacing * j.ravel()])


def split_data(data: SensorDataSet, partition: fm.Partition) -> list[np.ndarray]:
    """Index arrays of the sensors lying in each closed subdomain."""
    if len(data) == 0:
        return [np.zeros(0, dtype=int) for _ in range(partition.m)]
    (X0, X1), (Y0, Y1) = partition.domain
    tol = 1e-9 * max(X1 - X0, Y1 - Y0)
    c = data.coords
    out = (c[:, 0] < X0 - tol) | (c[:, 0] > X1 + tol) | (c[:, 1] < Y0 - tol) | (c[:, 1] > Y1 + tol)
    if out.any():
        p = c[np.argmax(out)]
        raise SensorOutsideDomain(f"sensor at ({p[0]:g}, {p[1]:g}) is outside the domain")
    return [np.flatnonzero(partition.contains(i, c, tol)) for i in range(partition.m)]


def gauss_modes(basis: KLBasis) -> np.ndarray:
    """Scaled modes ``sqrt(lambda_r) psi_r`` interpolated to Gauss points, ``(4 n_e, d)``."""
    conn = basis.grid.connectivity
    scaled = basis.nodal_modes * np.sqrt(basis.eigvals)
    return np.einsum("ead,qa->eqd", scaled[conn], _PHI).reshape(-1, basis.d)


class KLForwardModel:
    """xi -> permeability at Gauss points -> FEM solve -> sensor values.

    Counts solves and clamped permeability values, and accumulates the time
    spent per call (field evaluation, solve and observation).
    """

    def __init__(self, basis: KLBasis, bc: BoundarySpec, sensors, source=None, backend=None,
                 floor: float = fm.PERMEABILITY_FLOOR):
        self.basis = basis
        self.problem = DiffusionProblem(basis.grid, bc, source, backend)
        self.sensor_index = basis.grid.locate(np.asarray(sensors, dtype=float).reshape(-1, 2))
        self.modes = gauss_modes(basis)
        gp = basis.grid.gauss_points
        self.mean = basis.spec.mean_at(gp)
        self.floor = floor
        self.n_calls = 0
        self.n_clamped = 0
        self.time = 0.0

    @property
    def d(self) -> int:
        return self.basis.d

    def permeability(self, xi) -> np.ndarray:
        kq = self.mean + self.modes @ np.asarray(xi, dtype=float)
        kq, n = fm.clamp_positive(kq, self.floor)
        self.n_clamped += n
        return kq.reshape(-1, 4)

    def solve(self, xi) -> np.ndarray:
        return self.problem.solve(self.permeability(xi)).u

    def __call__(self, xi) -> np.ndarray:
        t0 = time.perf_counter()
        u = self.solve(xi)
        out = u[self.sensor_index]
        self.time += time.perf_counter() - t0
        self.n_calls += 1
        return out

    @property
    def time_per_call(self) -> float:
        return self.time / self.n_calls if self.n_calls else float("nan")


def gp_trace(fit: ActiveFit, interface: fm.Interface) -> Callable:
    model = fit.model
    return lambda x, y: model.predict(interface.arclength(np.column_stack([x, y])))[0]


def nodal_trace(u: np.ndarray, grid: Grid2D) -> Callable:
    """Interface data read off a global nodal solution."""
    return lambda x, y: u[grid.locate(np.column_stack([x, y]))]


def local_boundary(partition: fm.Partition, i: int, exterior: BoundarySpec, traces: dict) -> BoundarySpec:
    """Exterior edges keep the global condition; interface edges get Dirichlet traces.

    ``traces`` maps interface keys (``"1_2"``) to callables ``g(x, y)``.
    """
    (x0, x1), (y0, y1) = partition.subdomains[i]
    (X0, X1), (Y0, Y1) = partition.domain
    tol = 1e-9 * max(X1 - X0, Y1 - Y0)
    edges = {"left": ((x0, y0), (x0, y1), abs(x0 - X0) <= tol),
             "right": ((x1, y0), (x1, y1), abs(x1 - X1) <= tol),
             "bottom": ((x0, y0), (x1, y0), abs(y0 - Y0) <= tol),
             "top": ((x0, y1), (x1, y1), abs(y1 - Y1) <= tol)}
    conds = {}
    for name, (a, b, on_boundary) in edges.items():
        if on_boundary:
            conds[name] = getattr(exterior, name)
            continue
        match = [f for f in partition.interfaces if i in (f.i, f.j)
                 and np.allclose(sorted([f.start, f.end]), sorted([a, b]), atol=tol)]
        if not match:
            raise Unsupported(f"edge {name} of subdomain {i + 1} is not a single full interface")
        key = match[0].key
        if key not in traces:
            raise MissingInterfaceModel(f"no interface model for interface {key}")
        conds[name] = Dirichlet(traces[key])
    return BoundarySpec(**conds)


@dataclass
class LocalProblem:
    index: int
    grid: Grid2D
    global_index: np.ndarray
    basis: KLBasis
    bc: BoundarySpec
    sensors: np.ndarray
    data: SensorDataSet
    model: KLForwardModel


def build_local_models(partition: fm.Partition, spec: CovarianceSpec, delta_kl: float, traces: dict,
                       exterior: BoundarySpec, source, grid: Grid2D, data: SensorDataSet,
                       bases: Optional[Sequence[KLBasis]] = None, backend=None) -> list[LocalProblem]:
    subsets = split_data(data, partition)
    out = []
    for i, (rect, (sub, idx)) in enumerate(zip(partition.subdomains, partition.subgrids(grid))):
        basis = bases[i] if bases is not None else build_basis(spec, rect, delta_kl, grid=sub)
        bc = local_boundary(partition, i, exterior, traces)
        local = data.subset(subsets[i])
        model = KLForwardModel(basis, bc, local.coords, source, backend)
        out.append(LocalProblem(i, sub, idx, basis, bc, subsets[i], local, model))
    return out


def fit_interfaces(partition: fm.Partition, grid: Grid2D, data: SensorDataSet, delta_tol: float,
                   noise_std: float = 0.0) -> dict[str, ActiveFit]:
    fits = {}
    for f in partition.interfaces:
        test = grid.coords[grid.segment_nodes(f.start, f.end)]
        fits[f.key] = active_fit(f, data.coords, data.values, test, delta_tol, noise_std)
    return fits


# Chains run in forked workers read their problem from this module-level slot,
# which avoids pickling the FEM problem objects.
_JOBS: list = []


def _run_job(k):
    model, kwargs = _JOBS[k]
    chain = run_chain(model, **kwargs)
    return chain, model.n_calls, model.time, model.n_clamped


def run_local_chains(locals_: Sequence[LocalProblem], noise_std: float, betas, n: int, seed: int,
                     workers: int = 1, prior_box=(-1.0, 1.0)) -> list[Chain]:
    """One chain per subdomain, each on its own RNG stream; results do not depend on ``workers``."""
    betas = np.broadcast_to(np.asarray(betas, dtype=float), len(locals_))
    jobs = []
    for lp, beta in zip(locals_, betas):
        kwargs = dict(data=lp.data.values, noise_std=noise_std, prior_box=prior_box, beta=float(beta), n=n,
                      seed=seed, init=np.zeros(lp.basis.d), rng=stream_rng(seed, LOCAL_STREAM0 + lp.index))
        jobs.append((lp.model, kwargs))
    if workers <= 1 or len(jobs) == 1:
        return [run_chain(m, **kw) for m, kw in jobs]
    _JOBS[:] = jobs
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(min(workers, len(jobs)), mp_context=ctx) as pool:
            results = list(pool.map(_run_job, range(len(jobs))))
    finally:
        _JOBS.clear()
    chains = []
    for (model, _), (chain, calls, t, clamped) in zip(jobs, results):
        model.n_calls += calls
        model.time += t
        model.n_clamped += clamped
        chains.append(chain)
    return chains


@dataclass
class DDResult:
    chains: list[Chain]
    locals_: list[LocalProblem]
    fits: dict
    coupling: fm.CouplingMatrix
    xi_hat: np.ndarray
    burn: float
    timings: dict = field(default_factory=dict)

    def retained(self) -> list[np.ndarray]:
        return [burn_in(c, self.burn) for c in self.chains]


def assemble_posterior(chains: Sequence[Chain], coupling: fm.CouplingMatrix, burn: float) -> np.ndarray:
    """Assembled global coefficients, one row per retained iteration index."""
    return fm.assemble_many([burn_in(c, burn) for c in chains], coupling)


def run_dd_mcmc(partition: fm.Partition, global_basis: KLBasis, data: SensorDataSet, noise_std: float,
                exterior: BoundarySpec, source, beta, n: int, seed: int, delta_kl: float = 0.95,
                delta_tol: float = 1e-7, gp_noise: float = 0.0, burn: float = 0.1, workers: int = 1,
                traces: Optional[dict] = None, local_bases=None, backend=None) -> DDResult:
    """Interface fits, local models, local chains and assembly on the global basis grid.

    ``traces`` overrides the GP means with given interface data (``key -> g(x, y)``).
    """
    timings = {}
    grid = global_basis.grid
    t0 = time.perf_counter()
    fits = {}
    if traces is None:
        fits = fit_interfaces(partition, grid, data, delta_tol, gp_noise)
        traces = {k: gp_trace(v, next(f for f in partition.interfaces if f.key == k)) for k, v in fits.items()}
    timings["interfaces"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    locals_ = build_local_models(partition, global_basis.spec, delta_kl, traces, exterior, source, grid, data,
                                 local_bases, backend)
    coupling = fm.coupling_matrix(partition, global_basis, [lp.basis for lp in locals_])
    timings["local_models"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    chains = run_local_chains(locals_, noise_std, beta, n, seed, workers)
    timings["chains"] = time.perf_counter() - t0
    xi_hat = assemble_posterior(chains, coupling, burn)
    return DDResult(chains, locals_, fits, coupling, xi_hat, burn, timings)


def cost_report(dd_chains: Sequence[Chain], local_time: float, global_time: float,
                g_chain: Optional[Chain] = None) -> dict:
    """Solve counts in cost units of one local solve.

    Nominal counts are chain iterations (one forward solve each, as in the
    matched-cost protocol); actual counts exclude out-of-box proposals.
    """
    n_local = sum(c.n for c in dd_chains)
    ratio = global_time / local_time
    rep = {"local_solves_nominal": n_local, "local_solves_actual": sum(c.n_solves for c in dd_chains),
           "local_time_per_solve": local_time, "global_time_per_solve": global_time, "time_ratio": ratio,
           "dd_cost_units": float(n_local)}
    if g_chain is not None:
        rep.update({"global_solves_nominal": g_chain.n, "global_solves_actual": g_chain.n_solves,
                    "g_cost_units": g_chain.n * ratio})
    return rep


def time_solves(model: KLForwardModel, n: int = 50, seed: int = 0) -> float:
    """Median wall time of one forward call at random prior draws."""
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(n):
        xi = rng.uniform(-1, 1, model.d)
        t0 = time.perf_counter()
        model.solve(xi)[model.sensor_index]
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
