import numpy as np
import pytest

from ddmcmc import dd_orchestrator as dd
from ddmcmc import field_model as fm
from ddmcmc.config import ExperimentConfig
from ddmcmc.errors import MissingInterfaceModel, SensorOutsideDomain
from ddmcmc.experiment import Setup, gen_truth_and_data, state_errors
from ddmcmc.mh_sampler import Chain

DOMAIN = ((0.0, 3.0), (0.0, 1.0))


@pytest.fixture(scope="module")
def setup():
    return Setup(ExperimentConfig())


@pytest.fixture(scope="module")
def truth(setup):
    return gen_truth_and_data(setup.cfg, setup)


def exact_traces(setup, truth):
    return {f.key: dd.nodal_trace(truth.u, setup.grid) for f in setup.partition.interfaces}


def test_split_of_sensor_lattice():
    part = fm.Partition.strips(DOMAIN, 3)
    data = dd.SensorDataSet(dd.lattice_sensors(), np.zeros(161))
    subsets = dd.split_data(data, part)
    assert [len(s) for s in subsets] == [56, 63, 56]
    assert set(np.concatenate(subsets)) == set(range(161))
    shared = np.intersect1d(subsets[0], subsets[1])
    assert len(shared) == 7 and np.all(data.coords[shared, 0] == 1.0)


def test_split_edge_cases():
    quads = fm.Partition.from_rects(DOMAIN, [((0, 1.5), (0, 0.5)), ((1.5, 3), (0, 0.5)),
                                             ((0, 1.5), (0.5, 1)), ((1.5, 3), (0.5, 1))])
    empty = dd.split_data(dd.SensorDataSet(np.zeros((0, 2)), []), quads)
    assert len(empty) == 4 and all(len(s) == 0 for s in empty)
    corner = dd.split_data(dd.SensorDataSet([[1.5, 0.5]], [1.0]), quads)
    assert all(list(s) == [0] for s in corner)
    with pytest.raises(SensorOutsideDomain):
        dd.split_data(dd.SensorDataSet([[3.2, 0.5]], [1.0]), quads)


def test_exact_interface_traces_reproduce_global_state(setup, truth):
    means = {}
    for f in setup.partition.interfaces:
        nodes = setup.interface_nodes(f)
        means[f.key] = (f.arclength(setup.grid.coords[nodes]), truth.u[nodes], None)
    errs = state_errors(setup, truth, means)
    assert max(errs.values()) <= 1e-9


def test_local_kl_model_with_exact_traces(setup, truth):
    locs = dd.build_local_models(setup.partition, setup.spec, 0.95, exact_traces(setup, truth), setup.bc,
                                 setup.source, setup.grid, truth.dataset(setup), setup.local_bases)
    for lp in locs:
        assert lp.basis.d == 11
        assert np.array_equal(lp.sensors, dd.split_data(truth.dataset(setup), setup.partition)[lp.index])
        # interface data nodes are boundary nodes of the local grid
        for f in setup.partition.interfaces:
            if lp.index in (f.i, f.j):
                nodes = lp.grid.segment_nodes(f.start, f.end)
                assert np.all(np.isin(nodes, lp.model.problem.dirichlet_nodes))


def test_single_subdomain_matches_global_model(setup):
    part = fm.Partition.strips(DOMAIN, 1)
    data = dd.SensorDataSet(setup.sensors, np.zeros(161))
    (lp,) = dd.build_local_models(part, setup.spec, 0.95, {}, setup.bc, setup.source, setup.grid, data)
    xi = np.random.default_rng(0).uniform(-1, 1, setup.basis.d)
    assert lp.basis.d == setup.basis.d
    assert np.array_equal(lp.model(xi), setup.forward(xi))


def test_missing_interface_model(setup):
    data = dd.SensorDataSet(setup.sensors, np.zeros(161))
    with pytest.raises(MissingInterfaceModel, match="1_2"):
        dd.build_local_models(setup.partition, setup.spec, 0.95, {}, setup.bc, setup.source, setup.grid, data,
                              setup.local_bases)


def test_forward_model_is_deterministic(setup):
    xi = np.random.default_rng(1).uniform(-1, 1, setup.basis.d)
    assert np.array_equal(setup.forward(xi), setup.forward(xi))


def test_local_chains_deterministic_and_independent_of_workers(setup, truth):
    locs = dd.build_local_models(setup.partition, setup.spec, 0.95, exact_traces(setup, truth), setup.bc,
                                 setup.source, setup.grid, truth.dataset(setup), setup.local_bases)
    a = dd.run_local_chains(locs, truth.noise_std, 0.05, 40, seed=3)
    b = dd.run_local_chains(locs, truth.noise_std, 0.05, 40, seed=3, workers=2)
    rev = dd.run_local_chains(locs[::-1], truth.noise_std, 0.05, 40, seed=3)[::-1]
    for x, y, z in zip(a, b, rev):
        assert np.array_equal(x.samples, y.samples) and np.array_equal(x.samples, z.samples)
    assert not np.array_equal(a[0].samples[1:, 0], a[2].samples[1:, 0])
    assembled = [dd.assemble_posterior(c, setup.coupling, 0.1) for c in (a, b)]
    assert np.array_equal(*assembled) and assembled[0].shape == (36, setup.basis.d)


def fake_chain(n, outside=0):
    return Chain(np.zeros((n, 2)), np.ones(n, bool), np.zeros(n), 0.05, 0, n - outside, outside)


def test_cost_report_arithmetic():
    rep = dd.cost_report([fake_chain(10000, 100)] * 3, 0.001, 0.004, fake_chain(1000, 5))
    assert rep["local_solves_nominal"] == 30000 and rep["dd_cost_units"] == 30000
    assert rep["local_solves_actual"] == 29700
    assert rep["global_solves_nominal"] == 1000 and rep["global_solves_actual"] == 995
    assert rep["time_ratio"] == pytest.approx(4.0) and rep["g_cost_units"] == pytest.approx(4000.0)


def test_time_solves_leaves_counters(setup):
    before = setup.forward.n_calls
    t = dd.time_solves(setup.forward, n=5)
    assert t > 0 and setup.forward.n_calls == before
