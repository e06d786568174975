import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddmcmc.errors import InitOutsideSupport, LengthMismatch, ValidationError
from ddmcmc.mh_sampler import burn_in, log_likelihood, read_chain_csv, run_chain, stream_rng

BOX = (-1.0, 1.0)
TOY_DATA = np.array([0.35, -0.6])
TOY_NOISE = 0.4


def identity(xi):
    return np.array(xi, dtype=float)


def toy_oracle(n=801):
    # dense-grid posterior mean of an identity model on the box
    t = np.linspace(-1, 1, n)
    X, Y = np.meshgrid(t, t, indexing="ij")
    logp = -((X - TOY_DATA[0]) ** 2 + (Y - TOY_DATA[1]) ** 2) / (2 * TOY_NOISE ** 2)
    p = np.exp(logp - logp.max())
    w = np.full(n, t[1] - t[0])
    w[[0, -1]] /= 2
    p *= np.outer(w, w)
    return np.array([(p * X).sum(), (p * Y).sum()]) / p.sum()


def batch_se(x, nb=50):
    b = x[: len(x) // nb * nb].reshape(nb, -1, *x.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(nb)


def test_log_likelihood_examples():
    data = np.array([0.2, -0.1, 0.4])
    assert log_likelihood(lambda xi: data.copy(), np.zeros(2), data, 0.1) == 0.0
    sigma = 0.3
    r = np.array([sigma, sigma, 0.0])
    assert log_likelihood(lambda xi: data - r, np.zeros(2), data, sigma) == pytest.approx(-1.0, rel=1e-14)
    with pytest.raises(LengthMismatch):
        log_likelihood(lambda xi: data[:2], np.zeros(2), data, 0.1)
    with pytest.raises(ValidationError):
        log_likelihood(lambda xi: data, np.zeros(2), data, 0.0)


def test_flat_likelihood_accepts_almost_everything():
    chain = run_chain(lambda xi: np.zeros(1), np.zeros(1), 1e12, BOX, 0.01, 2000, seed=1, init=np.zeros(2))
    assert chain.accept_rate > 0.95


@pytest.mark.parametrize("seed", range(10))
def test_toy_posterior_mean_within_three_standard_errors(seed):
    ref = toy_oracle()
    chain = run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.5, 40000, seed=seed, init=np.zeros(2))
    kept = burn_in(chain)
    err = np.abs(kept.mean(axis=0) - ref)
    assert np.all(err <= 3 * batch_se(kept)), (err, batch_se(kept))


def test_replay_is_deterministic():
    a = run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.3, 500, seed=42, init=np.zeros(2))
    b = run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.3, 500, seed=42, init=np.zeros(2))
    assert np.array_equal(a.samples, b.samples) and np.array_equal(a.misfits, b.misfits)
    c = run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.3, 500, seed=43, init=np.zeros(2))
    assert not np.array_equal(a.samples, c.samples)


def test_streams_are_independent_and_reproducible():
    assert np.array_equal(stream_rng(7, 3).random(5), stream_rng(7, 3).random(5))
    assert not np.array_equal(stream_rng(7, 3).random(5), stream_rng(7, 4).random(5))
    assert not np.array_equal(stream_rng(7, 3).random(5), stream_rng(8, 3).random(5))


def test_detailed_balance_on_1d_target():
    # target on [-1, 1] proportional to exp(-(x - 0.4)^2 / (2 * 0.3^2))
    chain = run_chain(identity, np.array([0.4]), 0.3, BOX, 0.6, 100000, seed=5, init=np.zeros(1))
    edges = np.linspace(-1, 1, 21)
    hist = np.histogram(chain.samples[:, 0], bins=edges)[0] / chain.n
    fine = np.linspace(-1, 1, 20001)
    dens = np.exp(-((fine - 0.4) ** 2) / (2 * 0.09))
    mass = np.array([dens[(fine >= a) & (fine < b)].sum() for a, b in zip(edges[:-1], edges[1:])])
    mass[-1] += dens[-1]
    mass /= mass.sum()
    assert 0.5 * np.abs(hist - mass).sum() < 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 2.0))
def test_samples_in_box_and_rejections_repeat(seed, beta):
    lo, hi = np.array([-1.0, -0.5]), np.array([1.0, 0.5])
    chain = run_chain(identity, TOY_DATA, TOY_NOISE, (lo, hi), beta, 300, seed=seed, init=np.zeros(2))
    assert np.all(chain.samples >= lo) and np.all(chain.samples <= hi)
    rej = ~chain.accepted[1:]
    assert np.array_equal(chain.samples[1:][rej], chain.samples[:-1][rej])
    assert np.array_equal(chain.misfits[1:][rej], chain.misfits[:-1][rej])
    assert 0.0 <= chain.accept_rate <= 1.0
    assert chain.n_solves == 1 + (300 - 1 - chain.n_out_of_box)


def test_out_of_box_proposals_skip_the_model():
    calls = []

    def model(xi):
        calls.append(xi.copy())
        return xi

    chain = run_chain(model, np.zeros(2), 1.0, BOX, 3.0, 200, seed=0, init=np.zeros(2))
    assert len(calls) == chain.n_solves and chain.n_out_of_box > 0
    assert all(np.all(np.abs(c) <= 1) for c in calls)


def test_init_validation():
    with pytest.raises(InitOutsideSupport):
        run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.1, 10, seed=0, init=np.array([1.5, 0.0]))
    with pytest.raises(ValidationError):
        run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.0, 10, seed=0, init=np.zeros(2))
    with pytest.raises(ValidationError):
        run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.1, 1, seed=0, init=np.zeros(2))
    chain = run_chain(identity, TOY_DATA, TOY_NOISE, (np.full(2, -1.0), np.ones(2)), 0.1, 5, seed=0)
    assert np.array_equal(chain.samples[0], [0.0, 0.0])


def test_burn_in_examples():
    x = np.arange(10.0)[:, None]
    assert np.array_equal(burn_in(x, 0.0), x)
    assert np.array_equal(burn_in(x, 0.5)[:, 0], [5, 6, 7, 8, 9])
    assert len(burn_in(np.zeros((10000, 2)))) == 9000
    with pytest.raises(ValidationError):
        burn_in(x, 1.0)


def test_chain_csv_and_summary(tmp_path):
    chain = run_chain(identity, TOY_DATA, TOY_NOISE, BOX, 0.3, 50, seed=3, init=np.zeros(2))
    chain.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "iter,accepted,misfit,xi_1,xi_2"
    acc, mis, samples = read_chain_csv(tmp_path / "c.csv")
    assert np.array_equal(acc, chain.accepted) and np.array_equal(samples, chain.samples)
    assert np.array_equal(mis, chain.misfits)
    chain.summary_json(tmp_path / "c.json")
    s = json.loads((tmp_path / "c.json").read_text())
    assert s["accept_rate"] == chain.accept_rate and s["beta"] == 0.3
