"""Random-walk Metropolis-Hastings over KL coefficients with a box-uniform prior."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InitOutsideSupport, LengthMismatch, ValidationError

ForwardModel = Callable[[np.ndarray], np.ndarray]


def stream_rng(master_seed: int, stream: int) -> np.random.Generator:
    """Independent generator keyed by ``(master_seed, stream)``."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(stream),)))


def misfit(pred, data, noise_std: float) -> float:
    pred = np.asarray(pred, dtype=float)
    data = np.asarray(data, dtype=float)
    if pred.shape != data.shape:
        raise LengthMismatch(f"forward output has shape {pred.shape}, data has {data.shape}")
    if not noise_std > 0:
        raise ValidationError("noise_std must be positive")
    r = data - pred
    return float(r @ r) / (2.0 * noise_std ** 2)


def log_likelihood(model: ForwardModel, xi, data, noise_std: float) -> float:
    """Unnormalised Gaussian log-likelihood, ``-||d - F(xi)||^2 / (2 sigma^2)``."""
    return -misfit(model(np.asarray(xi, dtype=float)), data, noise_std)


@dataclass
class Chain:
    samples: np.ndarray
    accepted: np.ndarray = field(repr=False)
    misfits: np.ndarray = field(repr=False)
    beta: float
    seed: Optional[int]
    n_solves: int = 0
    n_out_of_box: int = 0
    wall_time: float = 0.0

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def accept_count(self) -> int:
        return int(self.accepted[1:].sum())

    @property
    def accept_rate(self) -> float:
        return self.accept_count / (self.n - 1)

    def summary(self) -> dict:
        return {"n": self.n, "d": int(self.samples.shape[1]), "beta": self.beta, "seed": self.seed,
                "accept_count": self.accept_count, "accept_rate": self.accept_rate,
                "forward_solves": self.n_solves, "out_of_box": self.n_out_of_box}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "accepted", "misfit"] + [f"xi_{k + 1}" for k in range(self.samples.shape[1])])
            for s in range(self.n):
                w.writerow([s + 1, int(self.accepted[s]), repr(float(self.misfits[s]))]
                           + [repr(float(v)) for v in self.samples[s]])

    def summary_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def read_chain_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(accepted, misfits, samples)`` from a trace CSV."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].astype(bool), data[:, 2], data[:, 3:]


def run_chain(model: ForwardModel, data, noise_std: float, prior_box, beta: float, n: int,
              seed=None, init=None, rng: Optional[np.random.Generator] = None) -> Chain:
    """Random-walk MH with isotropic Gaussian proposals of standard deviation ``beta``.

    ``prior_box`` is ``(lo, hi)``, scalars or per-coordinate arrays. Proposals
    outside the box are rejected without calling ``model``. Row 0 is ``init``
    and ``accepted[0]`` is True by convention.
    """
    data = np.asarray(data, dtype=float)
    if not beta > 0:
        raise ValidationError("beta must be positive")
    if n < 2:
        raise ValidationError("chain length must be at least 2")
    lo, hi = (np.asarray(b, dtype=float) for b in prior_box)
    if init is None:
        if lo.ndim == 0:
            raise ValidationError("init is required when the prior box is scalar")
        init = 0.5 * (lo + hi)
    xi = np.array(init, dtype=float)
    d = xi.size
    lo, hi = np.broadcast_to(lo, d), np.broadcast_to(hi, d)
    if np.any(xi < lo) or np.any(xi > hi):
        raise InitOutsideSupport("initial state lies outside the prior box")
    if rng is None:
        rng = np.random.default_rng(seed)

    t0 = time.perf_counter()
    samples = np.empty((n, d))
    accepted = np.zeros(n, dtype=bool)
    misfits = np.empty(n)
    eta = misfit(model(xi), data, noise_std)
    solves, outside = 1, 0
    samples[0], accepted[0], misfits[0] = xi, True, eta
    steps = rng.standard_normal((n - 1, d)) * beta
    logu = np.log(rng.random(n - 1))
    for s in range(1, n):
        prop = xi + steps[s - 1]
        if np.all(prop >= lo) and np.all(prop <= hi):
            eta_p = misfit(model(prop), data, noise_std)
            solves += 1
            if logu[s - 1] < eta - eta_p:
                xi, eta = prop, eta_p
                accepted[s] = True
        else:
            outside += 1
        samples[s], misfits[s] = xi, eta
    return Chain(samples, accepted, misfits, float(beta), None if seed is None else int(seed),
                 solves, outside, time.perf_counter() - t0)


def burn_in(chain, fraction: float = 0.1) -> np.ndarray:
    """Drop the first ``floor(fraction * N)`` rows."""
    if not 0 <= fraction < 1:
        raise ValidationError("burn-in fraction must lie in [0, 1)")
    samples = chain.samples if isinstance(chain, Chain) else np.asarray(chain)
    return samples[int(np.floor(fraction * len(samples))):]
