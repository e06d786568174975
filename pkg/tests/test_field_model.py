import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddmcmc import field_model as fm
from ddmcmc.covariance_kl import CovarianceSpec, FieldSample, build_basis, extract_local_coeffs
from ddmcmc.errors import BasisMismatch, EmptySampleSet, ValidationError
from ddmcmc.mesh_fem import Grid2D

DOMAIN = ((0.0, 3.0), (0.0, 1.0))
GRID = Grid2D((0, 3), (0, 1), 97, 33)


def make(corr_len=2.0, grid=GRID, m=3):
    spec = CovarianceSpec(corr_len=corr_len)
    g = build_basis(spec, DOMAIN, grid=grid)
    part = fm.Partition.strips(DOMAIN, m)
    locs = [build_basis(spec, r, grid=sub) for r, (sub, _) in zip(part.subdomains, part.subgrids(grid))]
    return g, part, locs


@pytest.fixture(scope="module")
def tp1():
    g, part, locs = make()
    return g, part, locs, fm.coupling_matrix(part, g, locs)


def local_row_from_global(g, part, locs, xi):
    a = FieldSample(g, xi).nodal()
    return a, [extract_local_coeffs(a[idx], lb) for (_, idx), lb in zip(part.subgrids(g.grid), locs)]


def test_strip_partition_interfaces():
    part = fm.Partition.strips(DOMAIN, 3)
    assert [(f.i, f.j) for f in part.interfaces] == [(0, 1), (1, 2)]
    f = part.interfaces[0]
    assert f.start == (1.0, 0.0) and f.end == (1.0, 1.0) and f.length == 1.0 and f.key == "1_2"
    assert np.allclose(f.arclength([[1.0, 0.25], [0.875, 0.5]]), [0.25, 0.5])


def test_block_partition_and_validation():
    quads = [((0, 1.5), (0, 0.5)), ((1.5, 3), (0, 0.5)), ((0, 1.5), (0.5, 1)), ((1.5, 3), (0.5, 1))]
    part = fm.Partition.from_rects(DOMAIN, quads)
    assert len(part.interfaces) == 4
    with pytest.raises(ValidationError, match="overlap"):
        fm.Partition.from_rects(DOMAIN, [((0, 2), (0, 1)), ((1, 3), (0, 1))])
    with pytest.raises(ValidationError, match="cover"):
        fm.Partition.from_rects(DOMAIN, [((0, 1), (0, 1)), ((1, 2), (0, 1))])
    with pytest.raises(ValidationError, match="beyond"):
        fm.Partition.from_rects(DOMAIN, [((0, 4), (0, 1))])


def test_single_subdomain_coupling_is_identity():
    g, part, locs = make(m=1)
    C = fm.coupling_matrix(part, g, locs)
    assert np.abs(C.full() - np.eye(g.d)).max() < 1e-6
    xi = np.random.default_rng(0).uniform(-1, 1, g.d)
    assert np.allclose(fm.assemble([xi], C, g).xi_hat, xi, atol=1e-6)
    st_ = fm.stitch([xi], part, locs, g.grid)
    assert np.abs(st_.values - FieldSample(g, xi).nodal()).max() < 1e-6


def test_coupling_columns_bounded(tp1):
    _, _, _, C = tp1
    assert np.linalg.norm(C.full(), axis=0).max() <= 1 + 1e-6


def test_coupling_rejects_mismatched_bases(tp1):
    g, part, locs, _ = tp1
    other = build_basis(CovarianceSpec(corr_len=1.0), part.subdomains[0], grid=locs[0].grid)
    with pytest.raises(BasisMismatch):
        fm.coupling_matrix(part, g, [other] + locs[1:])
    with pytest.raises(BasisMismatch):
        fm.coupling_matrix(part, g, locs[:2])


@pytest.mark.xfail(strict=True, reason="trapezoid and Simpson differ at O(h^2) ~ 2e-3 on the h=1/32 grid")
def test_coupling_simpson_agrees_at_1e5(tp1):
    g, part, locs, C = tp1
    S = fm.coupling_matrix(part, g, locs, quadrature="simpson")
    assert np.abs(C.full() - S.full()).max() <= 1e-5


def test_coupling_quadrature_gap_shrinks_second_order():
    gaps = []
    for n in (17, 33, 65):
        grid = Grid2D((0, 3), (0, 1), 3 * (n - 1) + 1, n)
        g, part, locs = make(grid=grid)
        C = fm.coupling_matrix(part, g, locs)
        S = fm.coupling_matrix(part, g, locs, quadrature="simpson")
        gaps.append(np.abs(C.full() - S.full()).max())
    ratios = np.array(gaps[:-1]) / gaps[1:]
    assert np.all(ratios > 3.0), gaps


def test_stitch_zero_row_is_mean(tp1):
    g, part, locs, _ = tp1
    s = fm.stitch([np.zeros(b.d) for b in locs], part, locs, g.grid)
    assert np.all(s.values == 1.0) and s.max_jump == 0.0


def test_stitch_round_trip_and_jumps(tp1):
    g, part, locs, _ = tp1
    rng = np.random.default_rng(1)
    a, row = local_row_from_global(g, part, locs, rng.uniform(-1, 1, g.d))
    s = fm.stitch(row, part, locs, g.grid)
    rel = s.distance(a) / np.sqrt(g.weights @ (a - 1.0) ** 2)
    assert rel <= np.sqrt(1 - 0.95) * 2
    generic = fm.stitch([rng.uniform(-1, 1, b.d) for b in locs], part, locs, g.grid)
    assert generic.max_jump > 0


def test_assembled_beats_stitched_and_is_orthogonal(tp1):
    g, part, locs, C = tp1
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, row = local_row_from_global(g, part, locs, rng.uniform(-1, 1, g.d))
        s = fm.stitch(row, part, locs, g.grid)
        ah = fm.assemble(row, C, g).nodal()
        w = g.weights
        err_hat = np.sqrt(w @ (a - ah) ** 2)
        assert err_hat <= s.distance(a)
        orth = [s.inner(g.nodal_modes[:, t]) - w @ (ah * g.nodal_modes[:, t]) for t in range(g.d)]
        assert np.abs(orth).max() < 1e-5
        lhs = s.distance(a) ** 2
        rhs = err_hat ** 2 + s.distance(ah) ** 2
        assert abs(lhs - rhs) <= 1e-4 * lhs


def test_assembled_field_is_projection_of_stitched(tp1):
    g, part, locs, C = tp1
    rng = np.random.default_rng(3)
    row = [rng.uniform(-1, 1, b.d) for b in locs]
    s = fm.stitch(row, part, locs, g.grid)
    mean = g.spec.mean_at(g.grid.coords)
    coeffs = np.array([s.inner(g.nodal_modes[:, t]) - g.weights @ (mean * g.nodal_modes[:, t]) for t in range(g.d)])
    proj = g.nodal_modes @ coeffs
    ah = fm.assemble(row, C, g).nodal() - mean
    assert np.abs(proj - ah).max() <= 1e-5 * np.abs(ah).max()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_assemble_is_linear(tp1, seed, alpha, beta):
    g, _, locs, C = tp1
    rng = np.random.default_rng(seed)
    x = [rng.uniform(-1, 1, b.d) for b in locs]
    y = [rng.uniform(-1, 1, b.d) for b in locs]
    comb = [alpha * u + beta * v for u, v in zip(x, y)]
    lhs = fm.assemble(comb, C, g).xi_hat
    rhs = alpha * fm.assemble(x, C, g).xi_hat + beta * fm.assemble(y, C, g).xi_hat
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_assemble_many_matches_rowwise(tp1):
    g, _, locs, C = tp1
    rng = np.random.default_rng(4)
    samples = [rng.uniform(-1, 1, (6, b.d)) for b in locs]
    many = fm.assemble_many(samples, C)
    for s in range(6):
        assert np.allclose(many[s], fm.assemble([m[s] for m in samples], C, g).xi_hat, atol=1e-14)
    with pytest.raises(ValidationError):
        fm.assemble_many([samples[0], samples[1][:3], samples[2]], C)


def test_posterior_moments():
    v = np.random.default_rng(0).normal(size=50)
    mean, var = fm.posterior_moments(np.tile(v, (7, 1)))
    assert np.allclose(mean, v) and np.all(var == 0)
    mean, var = fm.posterior_moments(np.vstack([v, -v]))
    assert np.allclose(mean, 0) and np.allclose(var, v ** 2)
    with pytest.raises(EmptySampleSet):
        fm.posterior_moments(v[None, :])


def test_single_mode_prior_variance(tp1):
    g = tp1[0]
    xi = np.random.default_rng(5).uniform(-1, 1, 10000)
    psi = g.nodal_modes[:, 0]
    fields = 1.0 + np.sqrt(g.eigvals[0]) * xi[:, None] * psi[None, :]
    _, var = fm.posterior_moments(fields)
    ref = g.eigvals[0] * psi ** 2 / 3
    big = ref > 0.05 * ref.max()
    assert np.all(np.abs(var[big] / ref[big] - 1) < 0.05)


def test_clamp_positive_counts():
    vals, n = fm.clamp_positive(np.array([0.5, -0.2, 1e-9, 2.0]))
    assert n == 2 and np.array_equal(vals, [0.5, 1e-6, 1e-6, 2.0])


def test_coefficients_csv(tmp_path):
    xi = np.arange(6.0).reshape(2, 3) / 7
    fm.write_coefficients_csv(tmp_path / "xi.csv", xi)
    lines = (tmp_path / "xi.csv").read_text().splitlines()
    assert lines[0] == "sample_index,xi_1,xi_2,xi_3"
    back = np.loadtxt(tmp_path / "xi.csv", delimiter=",", skiprows=1)
    assert np.array_equal(back[:, 1:], xi)
