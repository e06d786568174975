"""Experiment configuration stored as TOML.

Schema (all tables optional; missing keys take the defaults below)::

    [problem]   x_range, y_range, nx, ny, subdomains, source_center, source_amplitude
    [field]     mean, sigma, corr_len, delta_kl
    [sensors]   nx, ny, spacing, noise_percent
    [mcmc]      n, n_global, beta_dd, beta_global, beta_local, burn_in, workers
    [gp]        delta_tol, noise        (noise = "data" or a number)
    [run]       seed, out, data_grid_refine, truth_file
"""
from __future__ import annotations

import dataclasses
import hashlib
import sys
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Union

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError


@dataclass
class ProblemConfig:
    x_range: list = dc_field(default_factory=lambda: [0.0, 3.0])
    y_range: list = dc_field(default_factory=lambda: [0.0, 1.0])
    nx: int = 97
    ny: int = 33
    subdomains: int = 3
    source_center: list = dc_field(default_factory=lambda: [1.5, 0.5])
    source_amplitude: float = 3.0


@dataclass
class FieldConfig:
    mean: float = 1.0
    sigma: float = 0.25
    corr_len: float = 2.0
    delta_kl: float = 0.95


@dataclass
class SensorConfig:
    nx: int = 23
    ny: int = 7
    spacing: float = 0.125
    noise_percent: float = 1.0


@dataclass
class MCMCConfig:
    n: int = 10000
    n_global: int = 1000
    beta_dd: float = 0.05
    beta_global: float = 0.07
    beta_local: list = dc_field(default_factory=list)
    burn_in: float = 0.1
    workers: int = 1


@dataclass
class GPConfig:
    delta_tol: float = 1e-7
    noise: Union[str, float] = "data"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data_grid_refine: int = 1
    truth_file: str = ""


@dataclass
class ExperimentConfig:
    problem: ProblemConfig = dc_field(default_factory=ProblemConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    sensors: SensorConfig = dc_field(default_factory=SensorConfig)
    mcmc: MCMCConfig = dc_field(default_factory=MCMCConfig)
    gp: GPConfig = dc_field(default_factory=GPConfig)
    run: RunConfig = dc_field(default_factory=RunConfig)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ValidationError(f"unknown config section(s): {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            sub_cls = f.default_factory
            table = raw.get(f.name, {})
            if not isinstance(table, dict):
                raise ValidationError(f"[{f.name}] must be a table")
            names = {g.name for g in dataclasses.fields(sub_cls)}
            bad = set(table) - names
            if bad:
                raise ValidationError(f"unknown key(s) in [{f.name}]: {sorted(bad)}")
            kwargs[f.name] = sub_cls(**table)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d[section].update(changes)
        return ExperimentConfig.from_dict(d)

    def validate(self) -> None:
        p, f, s, m, g, r = self.problem, self.field, self.sensors, self.mcmc, self.gp, self.run
        _check(len(p.x_range) == 2 and p.x_range[1] > p.x_range[0], "problem.x_range must be increasing")
        _check(len(p.y_range) == 2 and p.y_range[1] > p.y_range[0], "problem.y_range must be increasing")
        _check(_is_int(p.nx) and _is_int(p.ny) and p.nx >= 2 and p.ny >= 2, "problem.nx and ny must be integers >= 2")
        _check(_is_int(p.subdomains) and p.subdomains >= 1, "problem.subdomains must be >= 1")
        _check((p.nx - 1) % p.subdomains == 0, "strip edges must fall on grid lines")
        _check(len(p.source_center) == 2, "problem.source_center needs two coordinates")
        _check(f.sigma > 0 and f.corr_len > 0, "field.sigma and corr_len must be positive")
        _check(0 < f.delta_kl < 1, "field.delta_kl must lie in (0, 1)")
        _check(_is_int(s.nx) and _is_int(s.ny) and s.nx >= 1 and s.ny >= 1, "sensor lattice needs nx, ny >= 1")
        _check(s.spacing > 0 and s.noise_percent >= 0, "sensors.spacing must be positive, noise_percent >= 0")
        hx = (p.x_range[1] - p.x_range[0]) / (p.nx - 1)
        hy = (p.y_range[1] - p.y_range[0]) / (p.ny - 1)
        for h in (hx, hy):
            q = s.spacing / h
            _check(abs(q - round(q)) < 1e-9, "sensor spacing must be a multiple of the grid spacing")
        _check(p.x_range[0] + s.spacing * s.nx <= p.x_range[1] + 1e-12
               and p.y_range[0] + s.spacing * s.ny <= p.y_range[1] + 1e-12, "sensor lattice leaves the domain")
        _check(_is_int(m.n) and _is_int(m.n_global) and m.n >= 2 and m.n_global >= 2, "chain lengths must be >= 2")
        _check(m.beta_dd > 0 and m.beta_global > 0, "proposal stepsizes must be positive")
        _check(not m.beta_local or (len(m.beta_local) == p.subdomains and all(b > 0 for b in m.beta_local)),
               "mcmc.beta_local needs one positive value per subdomain")
        _check(0 <= m.burn_in < 1, "mcmc.burn_in must lie in [0, 1)")
        _check(_is_int(m.workers) and m.workers >= 1, "mcmc.workers must be >= 1")
        _check(g.delta_tol > 0, "gp.delta_tol must be positive")
        _check(g.noise == "data" or (isinstance(g.noise, (int, float)) and not isinstance(g.noise, bool)
                                     and g.noise >= 0), 'gp.noise must be "data" or a number >= 0')
        _check(_is_int(r.seed) and 0 <= r.seed < 2 ** 64, "run.seed must be an unsigned 64-bit integer")
        _check(_is_int(r.data_grid_refine) and r.data_grid_refine >= 1, "run.data_grid_refine must be >= 1")

    @property
    def betas_local(self) -> list:
        return list(self.mcmc.beta_local) or [self.mcmc.beta_dd] * self.problem.subdomains


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check(ok: bool, msg: str) -> None:
    if not ok:
        raise ValidationError(msg)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"invalid TOML: {exc}") from exc
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def preset_path(name: str) -> Path:
    return Path(__file__).parent / "presets" / f"{name}.toml"
