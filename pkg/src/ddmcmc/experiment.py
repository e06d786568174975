"""Experiment driver: synthetic data, global and domain-decomposed inversion, metrics.

Every stage writes its outputs into a run directory and records them in
``manifest.json``. ``report`` reads only manifest-listed files, so metrics can
be recomputed from disk and compared with the in-memory values.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from . import field_model as fm
from .config import ExperimentConfig
from .covariance_kl import CovarianceSpec, KLBasis, build_basis
from .dd_orchestrator import (
    KLForwardModel,
    SensorDataSet,
    build_local_models,
    cost_report,
    fit_interfaces,
    gp_trace,
    lattice_sensors,
    local_boundary,
    run_local_chains,
    split_data,
    time_solves,
)
from .errors import MissingArtifact, ValidationError
from .gp_interface import read_interface_csv, relative_error, write_interface_csv
from .mesh_fem import BoundarySpec, DiffusionProblem, GaussianSource, Grid2D, read_nodal_csv, write_nodal_csv
from .mh_sampler import Chain, burn_in, read_chain_csv, run_chain, stream_rng

log = logging.getLogger(__name__)

TRUTH_STREAM, NOISE_STREAM, GLOBAL_STREAM = 0, 1, 2


class Setup:
    """Objects derived from a config: grid, bases, partition, forward model."""

    def __init__(self, cfg: ExperimentConfig):
        p, f = cfg.problem, cfg.field
        self.cfg = cfg
        self.domain = (tuple(p.x_range), tuple(p.y_range))
        self.grid = Grid2D(p.x_range, p.y_range, p.nx, p.ny)
        self.spec = CovarianceSpec(sigma=f.sigma, corr_len=f.corr_len, mean=f.mean)
        self.partition = fm.Partition.strips(self.domain, p.subdomains)
        self.bc = BoundarySpec()
        self.source = GaussianSource(tuple(p.source_center), p.source_amplitude)
        s = cfg.sensors
        self.sensors = lattice_sensors(s.nx, s.ny, s.spacing) + np.array([p.x_range[0], p.y_range[0]])

    @cached_property
    def basis(self) -> KLBasis:
        return build_basis(self.spec, self.domain, self.cfg.field.delta_kl, grid=self.grid)

    @cached_property
    def local_bases(self) -> list[KLBasis]:
        return [build_basis(self.spec, rect, self.cfg.field.delta_kl, grid=sub)
                for rect, (sub, _) in zip(self.partition.subdomains, self.partition.subgrids(self.grid))]

    @cached_property
    def forward(self) -> KLForwardModel:
        return KLForwardModel(self.basis, self.bc, self.sensors, self.source)

    @cached_property
    def coupling(self) -> fm.CouplingMatrix:
        return fm.coupling_matrix(self.partition, self.basis, self.local_bases)

    def interface_nodes(self, f: fm.Interface) -> np.ndarray:
        return self.grid.segment_nodes(f.start, f.end)

    def nodal(self, xi) -> np.ndarray:
        return fm.AssembledSample(self.basis, np.asarray(xi, dtype=float)).nodal()


@dataclass
class Truth:
    xi: np.ndarray
    nodal: np.ndarray
    u: np.ndarray
    clean: np.ndarray
    noisy: np.ndarray
    noise_std: float

    def dataset(self, setup: Setup) -> SensorDataSet:
        return SensorDataSet(setup.sensors, self.noisy)


def read_truth_file(path, d: int) -> np.ndarray:
    """Coefficients from a one-row coefficient CSV or a plain list of numbers."""
    try:
        text = Path(path).read_text().strip().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read truth file {path}: {exc}") from exc
    try:
        if text and text[0].startswith("sample_index"):
            vals = [float(v) for v in text[1].split(",")[1:]]
        else:
            vals = [float(v) for line in text for v in line.replace(",", " ").split()]
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"cannot parse truth file {path}: {exc}") from exc
    xi = np.array(vals)
    if xi.shape != (d,):
        raise ValidationError(f"truth file has {xi.size} coefficients, the global basis needs {d}")
    return xi


def gen_truth_and_data(cfg: ExperimentConfig, setup: Optional[Setup] = None, truth_xi=None) -> Truth:
    """Truth field from the prior (or given coefficients), its solution, and noisy sensor data.

    With ``data_grid_refine > 1`` the data come from a solve on a refined grid
    with the truth field evaluated pointwise; otherwise the inversion model is used.
    """
    setup = setup or Setup(cfg)
    b = setup.basis
    seed = cfg.run.seed
    if truth_xi is not None:
        xi = np.asarray(truth_xi, dtype=float)
    elif cfg.run.truth_file:
        xi = read_truth_file(cfg.run.truth_file, b.d)
    else:
        xi = stream_rng(seed, TRUTH_STREAM).uniform(-1.0, 1.0, b.d)
    r = cfg.run.data_grid_refine
    if r == 1:
        u = setup.forward.solve(xi)
        clean = u[setup.forward.sensor_index]
    else:
        fine = setup.grid.refined(r)
        gp = fine.gauss_points
        kq = b.spec.mean_at(gp) + b.modes_at(gp, check=False) @ (np.sqrt(b.eigvals) * xi)
        kq, _ = fm.clamp_positive(kq)
        uf = DiffusionProblem(fine, setup.bc, setup.source).solve(kq.reshape(-1, 4)).u
        u = uf[fine.locate(setup.grid.coords)]
        clean = uf[fine.locate(setup.sensors)]
    noise_std = cfg.sensors.noise_percent / 100.0 * float(np.mean(np.abs(clean)))
    noisy = clean.copy()
    if noise_std > 0:
        noisy = clean + noise_std * stream_rng(seed, NOISE_STREAM).standard_normal(len(clean))
    return Truth(xi, setup.nodal(xi), u, clean, noisy, noise_std)


def gp_noise(cfg: ExperimentConfig, truth: Truth) -> float:
    return truth.noise_std if cfg.gp.noise == "data" else float(cfg.gp.noise)


def run_gmcmc(cfg: ExperimentConfig, setup: Setup, truth: Truth) -> Chain:
    return run_chain(setup.forward, truth.noisy, truth.noise_std, (-1.0, 1.0), cfg.mcmc.beta_global,
                     cfg.mcmc.n_global, seed=cfg.run.seed, init=np.zeros(setup.basis.d),
                     rng=stream_rng(cfg.run.seed, GLOBAL_STREAM))


@dataclass
class DDRun:
    fits: dict
    interface_mean: dict
    locals_: list
    chains: list
    timings: dict = field(default_factory=dict)


def fit_gp(cfg: ExperimentConfig, setup: Setup, truth: Truth) -> tuple[dict, dict]:
    """Interface GP fits and their posterior means on the interface grid nodes."""
    fits = fit_interfaces(setup.partition, setup.grid, truth.dataset(setup), cfg.gp.delta_tol, gp_noise(cfg, truth))
    means = {}
    for f in setup.partition.interfaces:
        s = f.arclength(setup.grid.coords[setup.interface_nodes(f)])
        mu, var = fits[f.key].model.predict(s)
        means[f.key] = (s, mu, var)
    return fits, means


def run_ddmcmc(cfg: ExperimentConfig, setup: Setup, truth: Truth, fits=None, means=None) -> DDRun:
    timings = {}
    t0 = time.perf_counter()
    if fits is None:
        fits, means = fit_gp(cfg, setup, truth)
    timings["interfaces"] = time.perf_counter() - t0
    traces = {f.key: gp_trace(fits[f.key], f) for f in setup.partition.interfaces}
    locals_ = build_local_models(setup.partition, setup.spec, cfg.field.delta_kl, traces, setup.bc, setup.source,
                                 setup.grid, truth.dataset(setup), setup.local_bases)
    t0 = time.perf_counter()
    chains = run_local_chains(locals_, truth.noise_std, cfg.betas_local, cfg.mcmc.n, cfg.run.seed, cfg.mcmc.workers)
    timings["chains"] = time.perf_counter() - t0
    return DDRun(fits, means, locals_, chains, timings)


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b))


def interface_trace_fn(s, mu, f: fm.Interface):
    s, mu = np.asarray(s), np.asarray(mu)
    return lambda x, y: np.interp(f.arclength(np.column_stack([x, y])), s, mu)


def state_errors(setup: Setup, truth: Truth, interface_mean: dict) -> dict:
    """Local solves with the truth field and interface means against the global truth solution."""
    traces = {k: interface_trace_fn(s, mu, f) for f in setup.partition.interfaces
              for k, (s, mu, _) in [(f.key, interface_mean[f.key])]}
    out = {}
    for i, (sub, idx) in enumerate(setup.partition.subgrids(setup.grid)):
        bc = local_boundary(setup.partition, i, setup.bc, traces)
        u = DiffusionProblem(sub, bc, setup.source).solve(truth.nodal[idx]).u
        out[str(i + 1)] = _rel(u, truth.u[idx])
    return out


def compute_errors(setup: Setup, truth: Truth, g_retained: np.ndarray, local_retained: list,
                   interface_mean: dict, gp_info: dict, acceptance: dict) -> dict:
    """Relative errors with discrete nodal 2-norms over the global grid."""
    a = truth.nodal
    g_mean = setup.nodal(g_retained.mean(axis=0))
    xi_hat = fm.assemble_many(local_retained, setup.coupling)
    a_hat = setup.nodal(xi_hat.mean(axis=0))
    st = fm.stitch([r.mean(axis=0) for r in local_retained], setup.partition, setup.local_bases, setup.grid)
    eps_int = {}
    for f in setup.partition.interfaces:
        _, mu, _ = interface_mean[f.key]
        eps_int[f.key] = relative_error(truth.u[setup.interface_nodes(f)], mu)
    return {
        "epsilon": _rel(g_mean, a),
        "epsilon_stitched": _rel(st.values, a),
        "epsilon_assembled": _rel(a_hat, a),
        "eps_int": eps_int,
        "eps_state": state_errors(setup, truth, interface_mean),
        "acceptance": acceptance,
        "gp": gp_info,
        "stitched_mean_max_jump": st.max_jump,
        "samples": {"global_retained": int(len(g_retained)), "local_retained": int(len(local_retained[0]))},
    }


# ---------------------------------------------------------------- run directory

class RunDir:
    """Output directory with a manifest listing every file written."""

    def __init__(self, path, cfg: ExperimentConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        mpath = self.path / "manifest.json"
        self.manifest = {}
        if mpath.exists():
            try:
                self.manifest = json.loads(mpath.read_text())
            except json.JSONDecodeError:
                self.manifest = {}
        if self.manifest.get("config_hash") != cfg.digest:
            self.manifest = {"config_hash": cfg.digest, "seed": cfg.run.seed,
                             "streams": {"truth": TRUTH_STREAM, "noise": NOISE_STREAM, "global_chain": GLOBAL_STREAM,
                                         "local_chain": "10 + subdomain index"},
                             "stages": {}, "files": {}, "acceptance": {}}
        self.add_text("config.toml", cfg.dumps(), "config")

    def file(self, name: str, kind: str) -> Path:
        self.manifest["files"][name] = kind
        return self.path / name

    def add_text(self, name, text, kind):
        self.file(name, kind).write_text(text)

    def add_json(self, name, obj, kind):
        self.file(name, kind).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def need(self, name: str) -> Path:
        if name not in self.manifest["files"] or not (self.path / name).exists():
            raise MissingArtifact(f"{name} is not listed in the manifest of {self.path}; run the producing stage first")
        return self.path / name

    def stage(self, name, status, seconds=None, error=None):
        entry = {"status": status}
        if seconds is not None:
            entry["seconds"] = seconds
        if error is not None:
            entry["error"] = error
        self.manifest["stages"][name] = entry
        if status == "failed":
            self.manifest["failed_stage"] = name
        elif self.manifest.get("failed_stage") == name:
            del self.manifest["failed_stage"]
        self.save()

    def save(self):
        (self.path / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def save_truth(run: RunDir, setup: Setup, truth: Truth) -> None:
    fm.write_coefficients_csv(run.file("truth.csv", "truth"), truth.xi)
    write_nodal_csv(run.file("truth_field.csv", "field"), setup.grid, truth.nodal)
    write_nodal_csv(run.file("truth_solution.csv", "field"), setup.grid, truth.u)
    _write_rows(run.file("data.csv", "data"), ["x", "y", "clean", "noisy"],
                [(float(c[0]), float(c[1]), float(a), float(b)) for c, a, b in zip(setup.sensors, truth.clean, truth.noisy)])
    run.add_json("data.json", {"noise_std": truth.noise_std, "n_sensors": len(truth.clean),
                               "per_subdomain": [len(s) for s in split_data(truth.dataset(setup), setup.partition)]},
                 "data")


def load_truth(run: RunDir, setup: Setup) -> Truth:
    data = np.loadtxt(run.need("data.csv"), delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads(run.need("data.json").read_text())
    xi = np.loadtxt(run.need("truth.csv"), delimiter=",", skiprows=1, ndmin=2)[0, 1:]
    _, u = read_nodal_csv(run.need("truth_solution.csv"))
    return Truth(xi, setup.nodal(xi), u, data[:, 2], data[:, 3], float(meta["noise_std"]))


def save_gp(run: RunDir, fits: dict, means: dict) -> None:
    for key, (s, mu, var) in means.items():
        write_interface_csv(run.file(f"interface_{key}.csv", "interface"), s, mu, var)
        fits[key].history_json(run.file(f"history_gp_{key}.json", "gp_history"))


def load_gp(run: RunDir, setup: Setup) -> tuple[dict, dict]:
    means, info = {}, {"sizes": {}, "sigma_max": {}, "exhausted": {}}
    for f in setup.partition.interfaces:
        means[f.key] = read_interface_csv(run.need(f"interface_{f.key}.csv"))
        h = json.loads(run.need(f"history_gp_{f.key}.json").read_text())
        info["sizes"][f.key] = len(h["used"])
        info["sigma_max"][f.key] = h["sigma_max"]
        info["exhausted"][f.key] = h["exhausted"]
    return means, info


def gp_summary(fits: dict) -> dict:
    return {"sizes": {k: len(v.used) for k, v in fits.items()},
            "sigma_max": {k: v.sigma_max for k, v in fits.items()},
            "exhausted": {k: v.exhausted for k, v in fits.items()}}


def save_chain(run: RunDir, name: str, chain: Chain) -> None:
    chain.to_csv(run.file(f"chain_{name}.csv", "chain"))
    chain.summary_json(run.file(f"chain_{name}.json", "chain_summary"))
    run.manifest["acceptance"][name] = chain.accept_rate


def save_fields(run: RunDir, setup: Setup, prefix: str, nodal_samples: np.ndarray) -> None:
    mean, var = fm.posterior_moments(nodal_samples)
    write_nodal_csv(run.file(f"fields_{prefix}_mean.csv", "field"), setup.grid, mean)
    write_nodal_csv(run.file(f"fields_{prefix}_var.csv", "field"), setup.grid, var)


def nodal_samples(setup: Setup, xi_rows: np.ndarray) -> np.ndarray:
    b = setup.basis
    return b.spec.mean_at(b.grid.coords)[None, :] + (xi_rows * np.sqrt(b.eigvals)) @ b.nodal_modes.T


def report(run: RunDir, setup: Setup) -> dict:
    """Recompute every metric from manifest-listed files and write ``errors.json``."""
    cfg = setup.cfg
    truth = load_truth(run, setup)
    means, info = load_gp(run, setup)
    acc = {}
    a, _, g = read_chain_csv(run.need("chain_global.csv"))
    acc["global"] = float(a[1:].mean())
    local = []
    for i in range(setup.partition.m):
        a, _, s = read_chain_csv(run.need(f"chain_sub{i + 1}.csv"))
        acc[f"sub{i + 1}"] = float(a[1:].mean())
        local.append(burn_in(s, cfg.mcmc.burn_in))
    errors = compute_errors(setup, truth, burn_in(g, cfg.mcmc.burn_in), local, means, info, acc)
    run.add_json("errors.json", errors, "report")
    return errors


def cost_summary(setup: Setup, g_chain: Chain, dd: DDRun, timing_solves: int = 50) -> dict:
    """Solve counts and per-solve times measured inside the chains and by a separate timer."""
    t_loc = float(np.mean([lp.model.time_per_call for lp in dd.locals_]))
    t_glob = setup.forward.time_per_call
    rep = cost_report(dd.chains, t_loc, t_glob, g_chain)
    rep["timed_local"] = float(np.mean([time_solves(lp.model, timing_solves) for lp in dd.locals_]))
    rep["timed_global"] = time_solves(setup.forward, timing_solves)
    rep["timed_ratio"] = rep["timed_global"] / rep["timed_local"]
    rep["m"] = setup.partition.m
    rep["clamped_values"] = setup.forward.n_clamped + sum(lp.model.n_clamped for lp in dd.locals_)
    return rep


def run_all(cfg: ExperimentConfig, out=None, stages=("gen-data", "gp-fit", "run-gmcmc", "run-ddmcmc", "report")) -> dict:
    """Run stages in order inside one process, persisting partial results on failure."""
    setup = Setup(cfg)
    run = RunDir(out or cfg.run.out, cfg)
    state = {}
    for name in stages:
        t0 = time.perf_counter()
        run.stage(name, "running")
        try:
            _STAGES[name](run, setup, state)
        except Exception as exc:
            run.stage(name, "failed", time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")
            raise
        run.stage(name, "done", time.perf_counter() - t0)
    return state


def _truth(run, setup, state):
    if "truth" not in state:
        state["truth"] = load_truth(run, setup)
    return state["truth"]


def _stage_gen(run, setup, state):
    truth = gen_truth_and_data(setup.cfg, setup)
    save_truth(run, setup, truth)
    state["truth"] = truth


def _stage_kl(run, setup, state):
    run.add_json("kl_info.json", kl_info(setup), "kl")


def _stage_gp(run, setup, state):
    truth = _truth(run, setup, state)
    fits, means = fit_gp(setup.cfg, setup, truth)
    save_gp(run, fits, means)
    state["fits"], state["means"] = fits, means


def _stage_g(run, setup, state):
    truth = _truth(run, setup, state)
    chain = run_gmcmc(setup.cfg, setup, truth)
    save_chain(run, "global", chain)
    save_fields(run, setup, "global", nodal_samples(setup, burn_in(chain, setup.cfg.mcmc.burn_in)))
    state["g_chain"] = chain


def _stage_dd(run, setup, state):
    truth = _truth(run, setup, state)
    dd = run_ddmcmc(setup.cfg, setup, truth, state.get("fits"), state.get("means"))
    if "fits" not in state:
        save_gp(run, dd.fits, dd.interface_mean)
    for i, c in enumerate(dd.chains):
        save_chain(run, f"sub{i + 1}", c)
    retained = [burn_in(c, setup.cfg.mcmc.burn_in) for c in dd.chains]
    xi_hat = fm.assemble_many(retained, setup.coupling)
    fm.write_coefficients_csv(run.file("assembled_xi.csv", "assembled"), xi_hat)
    save_fields(run, setup, "assembled", nodal_samples(setup, xi_hat))
    st = fm.stitch([r.mean(axis=0) for r in retained], setup.partition, setup.local_bases, setup.grid)
    write_nodal_csv(run.file("fields_stitched_mean.csv", "field"), setup.grid, st.values)
    state["dd"] = dd
    if "g_chain" in state:
        run.add_json("cost.json", cost_summary(setup, state["g_chain"], dd), "cost")


def _stage_report(run, setup, state):
    state["errors"] = report(run, setup)


_STAGES = {"gen-data": _stage_gen, "kl-info": _stage_kl, "gp-fit": _stage_gp, "run-gmcmc": _stage_g,
           "run-ddmcmc": _stage_dd, "report": _stage_report}


def kl_info(setup: Setup) -> dict:
    return {"global": setup.basis.summary(), "local": [b.summary() for b in setup.local_bases]}
