import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcip.fem import divdiv_matrix, p1_gradients, scalar_stiffness
from hybridcip.grid_mesh import SimplicialMesh, build_hybrid_mesh
from hybridcip.media import CoefficientField
from hybridcip.wavesolver import (
    CflViolation,
    HybridSystem,
    NumericalInstability,
    SourcePulse,
    TimeGrid,
    cfl_dt,
    discrete_energy,
    divergence_residual,
    solve_adjoint,
    solve_forward,
    solve_forward_fd,
    solve_forward_union,
    step_fdm,
    step_fem,
)
from hybridcip.inversion import time_weight_z

from conftest import smooth_field


def _background(mesh):
    return CoefficientField.background(mesh.fem.n_nodes)


def test_time_grid_invariants():
    tg = TimeGrid.from_dt(1.0, 0.03)
    assert tg.dt <= 0.03 and tg.dt * tg.steps == pytest.approx(1.0, abs=1e-12)
    assert tg.trapezoid_weights().sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0.3, 3)


def test_cfl_formula():
    m2 = build_hybrid_mesh([[0, 0], [1, 1]], [[0.2, 0.2], [0.8, 0.8]], 0.1)
    assert cfl_dt(m2, 1.0) == pytest.approx(0.070710678, abs=1e-9)
    m3 = build_hybrid_mesh([[0] * 3, [1] * 3], [[0.3] * 3, [0.7] * 3], 0.1)
    assert cfl_dt(m3, 0.5) == pytest.approx(0.028867513, abs=1e-9)


def test_zero_in_zero_out(coarse_mesh):
    tg = TimeGrid.from_dt(0.5, cfl_dt(coarse_mesh, 0.5))
    c = CoefficientField(np.full(coarse_mesh.fem.n_nodes, 3.0), np.full(coarse_mesh.fem.n_nodes, 0.5))
    hist, trace = solve_forward(coarse_mesh, c, SourcePulse.zero(2), tg)
    assert not hist.values.any() and not trace.values.any()
    lam = solve_adjoint(coarse_mesh, c, trace, np.ones(tg.steps + 1), tg)
    assert not lam.values.any()


def test_step_fdm_zero_and_stencil():
    m = build_hybrid_mesh([[0, 0], [1, 1]], [[0.25, 0.25], [0.75, 0.75]], 0.125)
    g = m.grid
    z = np.zeros((g.n_nodes, 2))
    assert not step_fdm(z, z, g, 0.05).any()
    # discrete delta at an interior node, previous state zero
    curr = np.zeros((g.n_nodes, 2))
    k = g.flat_index(2, 3)
    curr[k, 0] = 1.0
    dt, h = 0.05, g.h
    nxt = step_fdm(np.zeros_like(curr), curr, g, dt)
    r = (dt / h) ** 2
    assert nxt[k, 0] == pytest.approx(2 - 4 * r)
    for nb in (g.flat_index(1, 3), g.flat_index(3, 3), g.flat_index(2, 2), g.flat_index(2, 4)):
        assert nxt[nb, 0] == pytest.approx(r)
    assert np.count_nonzero(nxt) == 5


def test_unit_triangle_element_matrices():
    tri = SimplicialMesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]))
    k = scalar_stiffness(tri).toarray()
    assert np.allclose(k, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
    # (eps - 1) |K| (div phi_i e_a)(div phi_j e_b) with grads (-1,-1), (1,0), (0,1)
    b = np.array([-1, -1, 1, 0, 0, 1.0])
    d = divdiv_matrix(tri, np.full(3, 3.0)).toarray()
    assert np.allclose(d, 2 * 0.5 * np.outer(b, b))
    assert not divdiv_matrix(tri, np.ones(3)).toarray().any()
    assert np.allclose(p1_gradients(tri)[0], [[-1, -1], [1, 0], [0, 1]])


def test_step_fem_background_is_plain_wave(coarse_mesh):
    """With eps = 1 the div term vanishes and the FE step is the Galerkin Laplacian step."""
    sys1 = HybridSystem(coarse_mesh, _background(coarse_mesh))
    fem = coarse_mesh.fem
    rng = np.random.default_rng(0)
    prev, curr = rng.normal(size=(2, fem.n_nodes, 2))
    dt = 0.01
    nxt = step_fem(prev, curr, sys1, dt)
    k = scalar_stiffness(fem).toarray()
    m = fem.lumped_mass
    want = 2 * curr - prev - dt**2 * (k @ curr) / m[:, None]
    free = sys1.free
    assert np.allclose(nxt[free], want[free], atol=1e-12)
    assert not step_fem(np.zeros_like(curr), np.zeros_like(curr), sys1, dt).any()


def test_hybrid_matches_pure_fd(coarse_mesh):
    tg = TimeGrid(200 * cfl_dt(coarse_mesh, 0.5), cfl_dt(coarse_mesh, 0.5), 200)
    pulse = SourcePulse.bump([0.45, 0.55], 0.1, [1.0, -0.5])
    hist, _ = solve_forward(coarse_mesh, _background(coarse_mesh), pulse, tg, region="union")
    ref = solve_forward_fd(coarse_mesh.grid, pulse, tg)
    assert np.max(np.abs(hist.values - ref.values)) <= 1e-12


def test_split_stepping_equals_union_operator(coarse_mesh):
    rng = np.random.default_rng(4)
    x = coarse_mesh.fem.nodes
    c = CoefficientField(smooth_field(x, 1, 6, rng), smooth_field(x, 0, 1, rng))
    tg = TimeGrid.from_dt(0.5, cfl_dt(coarse_mesh, 0.5))
    pulse = SourcePulse.bump([0.5, 0.5], 0.15, [0.3, 1.0])
    hist, _ = solve_forward(coarse_mesh, c, pulse, tg, region="union")
    ref = solve_forward_union(HybridSystem(coarse_mesh, c), pulse, tg)
    assert np.max(np.abs(hist.values - ref)) <= 1e-12


def test_abc_leakage_small():
    m = build_hybrid_mesh([[0, 0], [1, 1]], [[0.25, 0.25], [0.75, 0.75]], 1 / 64)
    s = HybridSystem(m, _background(m))
    dt = cfl_dt(m, 0.5)
    tg = TimeGrid(400 * dt, dt, 400)
    pulse = SourcePulse.plane(2, 0, 0.5, 0.05, [0.0, 1.0])
    energies = []
    solve_forward(m, _background(m), pulse, tg,
                  on_step=lambda n, a, b: energies.append(discrete_energy(a, b, s, dt)))
    # by t = 400 dt ~ 2.2 both halves of the front have crossed the domain twice over
    assert energies[-1] <= 0.02 * energies[0]


def test_energy_decreases_with_conductivity(coarse_mesh):
    n = coarse_mesh.fem.n_nodes
    x = coarse_mesh.fem.nodes
    sig = np.where(coarse_mesh.fem.is_boundary_node, 0.0, 0.5)
    c = CoefficientField(np.ones(n) + 2 * np.exp(-np.sum((x - 0.5) ** 2, axis=1) / 0.01) *
                         ~coarse_mesh.fem.is_boundary_node, sig)
    s = HybridSystem(coarse_mesh, c)
    dt = cfl_dt(coarse_mesh, 0.5)
    tg = TimeGrid(60 * dt, dt, 60)
    e = []
    solve_forward(coarse_mesh, c, SourcePulse.bump([0.5, 0.5], 0.06, [1, 1]), tg,
                  on_step=lambda k, a, b: e.append(discrete_energy(a, b, s, dt)))
    assert np.all(np.diff(e) < 0)


def test_energy_of_zero_state(coarse_mesh):
    s = HybridSystem(coarse_mesh, _background(coarse_mesh))
    z = np.zeros((coarse_mesh.n_union, 2))
    assert discrete_energy(z, z, s, 0.01) == 0.0


@pytest.mark.parametrize("safety", [0.9, 1.0])
def test_stable_below_limit(coarse_mesh, safety):
    dt = coarse_mesh.h_fdm / math.sqrt(2) * safety
    tg = TimeGrid(800 * dt, dt, 800)
    hist, _ = solve_forward(coarse_mesh, _background(coarse_mesh), SourcePulse.bump([0.5, 0.5], 0.1, [1, 0]), tg)
    assert np.max(np.abs(hist.values)) < 10.0


def test_unstable_above_limit_detected(coarse_mesh):
    dt = coarse_mesh.h_fdm / math.sqrt(2) * 1.1
    tg = TimeGrid(2000 * dt, dt, 2000)
    pulse = SourcePulse.bump([0.5, 0.5], 0.1, [1, 0])
    with pytest.raises(CflViolation):
        solve_forward(coarse_mesh, _background(coarse_mesh), pulse, tg)
    with pytest.raises(NumericalInstability) as info:
        solve_forward(coarse_mesh, _background(coarse_mesh), pulse, tg, check_cfl=False)
    assert 0 < info.value.step <= 2000


def _space_time_matrix(system, tg):
    """Dense matrix of the forward recurrence: rows = step equations 0..N-1, cols = E^1..E^N."""
    d = system.dim
    n = system.mesh.n_union * d
    N = tg.steps
    dt = tg.dt
    M = np.repeat(system.union_mass, d)
    C = np.repeat(system.union_damping, d)
    A = system.union_operator.toarray()
    L = np.zeros((N * n, N * n))
    blk = lambda r, c: (slice(r * n, (r + 1) * n), slice(c * n, (c + 1) * n))  # noqa: E731
    # step 0 with E^-1 = E^1 - 2 dt f1: 2 M E^1 / dt^2 + ...
    L[blk(0, 0)] = np.diag(2 * M / dt**2)
    for k in range(1, N):
        L[blk(k, k)] = np.diag(M / dt**2 + C / (2 * dt))  # E^{k+1}
        L[blk(k, k - 1)] = A - np.diag(2 * M / dt**2)  # E^k
        if k >= 2:
            L[blk(k, k - 2)] = np.diag(M / dt**2 - C / (2 * dt))  # E^{k-1}
    return L


def test_adjoint_is_space_time_transpose(tiny_mesh):
    rng = np.random.default_rng(11)
    n = tiny_mesh.fem.n_nodes
    c = CoefficientField(np.array([1, 1, 1, 1, 4.0, 1, 1, 1, 1]), np.array([0, 0, 0, 0, 0.7, 0, 0, 0, 0]))
    tg = TimeGrid(7 * 0.05, 0.05, 7)
    s = HybridSystem(tiny_mesh, c)
    _, trace = solve_forward(tiny_mesh, c, SourcePulse.zero(2), tg, system=s)
    residual = trace.with_values(rng.normal(size=trace.values.shape))
    z = rng.uniform(0.5, 1.0, tg.steps + 1)
    lam = solve_adjoint(tiny_mesh, c, residual, z, tg, region="union", system=s)
    d = 2
    n_dof = tiny_mesh.n_union * d
    g = np.zeros((tg.steps, n_dof))
    w = tg.trapezoid_weights() * z
    b = tiny_mesh.grid.boundary_measure[residual.nodes]
    for k in range(1, tg.steps + 1):
        gk = np.zeros((tiny_mesh.n_union, d))
        gk[residual.nodes] = w[k] * b[:, None] * residual.values[k]
        g[k - 1] = gk.ravel()
    L = _space_time_matrix(s, tg)
    want = np.linalg.solve(L.T, -g.ravel() / tg.dt).reshape(tg.steps, -1)
    got = lam.values[: tg.steps].reshape(tg.steps, -1)
    assert np.max(np.abs(got - want)) <= 1e-10 * np.max(np.abs(want))
    assert not lam.values[-1].any()
    assert n == 9


def test_adjoint_is_time_reversed_forward(coarse_mesh):
    """With eps = 1, sigma = 0 and z(T) = 0 the adjoint march is the forward march of the
    reversed boundary forcing, apart from the start-up step at t = 0."""
    rng = np.random.default_rng(5)
    c = _background(coarse_mesh)
    dt = cfl_dt(coarse_mesh, 0.5)
    tg = TimeGrid(80 * dt, dt, 80)
    grid = coarse_mesh.grid
    nodes = coarse_mesh.outer_boundary_nodes
    r = rng.normal(size=(tg.steps + 1, len(nodes), 2))
    from hybridcip.wavesolver import BoundaryTrace
    z = time_weight_z(tg)
    lam = solve_adjoint(coarse_mesh, c, BoundaryTrace(r, nodes, tg), z, tg, region="union")
    w = tg.trapezoid_weights() * z
    b = grid.boundary_measure[nodes]

    def forcing(x, t):
        out = np.zeros((len(x), 2))
        if len(x) == grid.n_nodes:
            j = int(round(t / dt))
            out[nodes] = -(w[tg.steps - j] / dt) * b[:, None] * r[tg.steps - j] / grid.lumped_mass[nodes, None]
        return out

    hist, _ = solve_forward(coarse_mesh, c, SourcePulse(2, forcing=forcing), tg, region="union")
    mu = lam.values[::-1]
    assert np.allclose(hist.values[: tg.steps], mu[: tg.steps], rtol=0, atol=1e-12 * np.abs(mu).max())


def test_divergence_residual_reported(coarse_mesh):
    tg = TimeGrid.from_dt(0.3, cfl_dt(coarse_mesh, 0.5))
    c = _background(coarse_mesh)
    hist, _ = solve_forward(coarse_mesh, c, SourcePulse.bump([0.5, 0.5], 0.1, [1, 0]), tg)
    res = divergence_residual(hist, HybridSystem(coarse_mesh, c))
    assert res.shape == (tg.steps + 1,) and np.all(np.isfinite(res)) and res[0] == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_conserved_without_damping_random_eps(seed):
    """Interior undamped rows conserve the staggered energy up to the boundary flux."""
    m = build_hybrid_mesh([[0, 0], [1, 1]], [[0.25, 0.25], [0.75, 0.75]], 0.125)
    rng = np.random.default_rng(seed)
    x = m.fem.nodes
    eps = np.where(m.fem.is_boundary_node, 1.0, rng.uniform(1, 10, len(x)))
    c = CoefficientField(eps, np.zeros(len(x)))
    s = HybridSystem(m, c)
    a = s.union_operator.toarray()
    assert np.allclose(a, a.T)
    assert s.stable_dt() >= cfl_dt(m, 0.5)
