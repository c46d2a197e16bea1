"""Explicit time stepping of the stabilised electric-field system.

Forward model, after rescaling time by the speed of light::

    eps E_tt + sigma E_t - Lap E - grad div((eps - 1) E) = F     in the domain
    E(0) = f0,  E_t(0) = f1,  dE/dn = -E_t                        on the outer boundary

The FD grid covers the domain with eps = 1, sigma = 0; the FE mesh covers the
inner box.  Both subsystems share one semi-discrete form

    M (E^{n+1} - 2E^n + E^{n-1}) / dt^2 + C (E^{n+1} - E^{n-1}) / (2 dt) + A E^n = G^n

with lumped masses M (eps-weighted inside the FE region), damping C (sigma
mass in the FE region, boundary measure on the outer boundary) and stiffness
A.  On FD nodes A is the 5/7-point Laplacian; on FE nodes it is the P1
stiffness plus the div-div stabilisation.  The first step uses
E^{-1} = E^1 - 2 dt f1.

The adjoint marches the exact transpose of this recurrence backwards in
time, so gradients built from it are exact for the discrete misfit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from .fem import divdiv_matrix, element_divergence, p1_gradients, scalar_stiffness, weighted_lumped_mass
from .grid_mesh import HybridMesh, StructuredGrid
from .media import CoefficientField

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class CflViolation(SolverError):
    pass


class NumericalInstability(SolverError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(f"non-finite or diverging field at step {step}" + (f": {msg}" if msg else ""))
        self.step = step


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    T: float
    dt: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or self.dt <= 0:
            raise ValueError("time grid needs at least one positive step")
        if abs(self.dt * self.steps - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError("dt * steps must equal T")

    @classmethod
    def from_dt(cls, T: float, dt_max: float) -> "TimeGrid":
        """Largest uniform step not exceeding ``dt_max`` that divides ``T``."""
        steps = max(1, math.ceil(T / dt_max - 1e-9))
        return cls(float(T), T / steps, steps)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


VectorProfile = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SourcePulse:
    """Initial data f0, f1 and an optional volumetric forcing F(x, t).

    Each profile maps node coordinates (n, d) to values (n, d); ``None``
    means identically zero.
    """

    dim: int
    f0: VectorProfile | None = None
    f1: VectorProfile | None = None
    forcing: Callable[[np.ndarray, float], np.ndarray] | None = None
    description: dict = field(default_factory=dict, compare=False)

    def initial(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros((len(x), self.dim))
        f0 = z if self.f0 is None else np.asarray(self.f0(x), float).reshape(z.shape)
        f1 = z if self.f1 is None else np.asarray(self.f1(x), float).reshape(z.shape)
        if not (np.all(np.isfinite(f0)) and np.all(np.isfinite(f1))):
            raise SolverError("initial data must be finite")
        return f0, f1

    def load(self, x: np.ndarray, t: float) -> np.ndarray | None:
        if self.forcing is None:
            return None
        return np.asarray(self.forcing(x, t), float).reshape(len(x), self.dim)

    @classmethod
    def zero(cls, dim: int) -> "SourcePulse":
        return cls(dim, description={"kind": "zero"})

    @classmethod
    def bump(cls, center, width: float, polarization, amplitude: float = 1.0) -> "SourcePulse":
        """f0 = 0, f1 = amplitude * exp(-|x - c|^2 / w^2) * polarization."""
        c = np.asarray(center, float)
        p = np.asarray(polarization, float)

        def f1(x):
            r2 = np.sum((x - c) ** 2, axis=1)
            return amplitude * np.exp(-r2 / width**2)[:, None] * p[None, :]

        return cls(len(c), f1=f1, description={
            "kind": "bump", "center": c.tolist(), "width": width,
            "polarization": p.tolist(), "amplitude": amplitude})

    @classmethod
    def plane(cls, dim: int, axis: int, position: float, width: float, polarization,
              amplitude: float = 1.0) -> "SourcePulse":
        """f0 = 0, f1 varying only along ``axis``: a planar front."""
        p = np.asarray(polarization, float)

        def f1(x):
            s = (x[:, axis] - position) / width
            return amplitude * np.exp(-s**2)[:, None] * p[None, :]

        return cls(dim, f1=f1, description={
            "kind": "plane", "axis": axis, "position": position, "width": width,
            "polarization": p.tolist(), "amplitude": amplitude})


@dataclass(frozen=True, eq=False)
class FieldHistory:
    """Snapshots (steps+1, nodes, d) of E or lambda on the given nodes."""

    values: np.ndarray
    coords: np.ndarray
    tg: TimeGrid
    region: str = "fem"

    def __post_init__(self):
        if self.values.shape[:2] != (self.tg.steps + 1, len(self.coords)):
            raise ValueError("history shape inconsistent with time grid / nodes")


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Field on the outer-boundary FD nodes, (steps+1, n_boundary, d)."""

    values: np.ndarray
    nodes: np.ndarray
    tg: TimeGrid

    def same_grid(self, other: "BoundaryTrace") -> bool:
        return (
            self.values.shape == other.values.shape
            and np.array_equal(self.nodes, other.nodes)
            and self.tg.steps == other.tg.steps
            and math.isclose(self.tg.dt, other.tg.dt, rel_tol=1e-12)
        )

    def with_values(self, values: np.ndarray) -> "BoundaryTrace":
        return BoundaryTrace(np.asarray(values, float), self.nodes, self.tg)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def cfl_dt(mesh: HybridMesh, safety: float = 1.0) -> float:
    """safety * h_min / sqrt(d), h_min over the FD spacing and FE edges."""
    if not 0 < safety:
        raise ValueError("safety must be positive")
    p = mesh.fem.nodes[mesh.fem.edges]
    shortest = float(np.min(np.linalg.norm(p[:, 1] - p[:, 0], axis=1)))
    return safety * min(mesh.h_fdm, shortest) / math.sqrt(mesh.dim)


def fd_laplacian(grid: StructuredGrid, u: np.ndarray) -> np.ndarray:
    """K u with K the lumped Q1/FD stiffness: sum over grid edges of w_e (u_i - u_j)."""
    d = u.shape[-1]
    ug = u.reshape(*grid.shape, d)
    out = np.zeros_like(ug)
    for a in range(grid.dim):
        lo = [slice(None)] * (grid.dim + 1)
        hi = [slice(None)] * (grid.dim + 1)
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        flux = grid.all_edge_weights[a][..., None] * (ug[hi] - ug[lo])
        out[lo] -= flux
        out[hi] += flux
    return out.reshape(u.shape)


def fd_matrix(grid: StructuredGrid) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    idx = np.arange(grid.n_nodes).reshape(grid.shape)
    for a in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        i, j = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
        w = grid.edge_weights(a).ravel()
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [w, w, -w, -w]
    n = grid.n_nodes
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


class HybridSystem:
    """Coefficient-dependent discrete operators on a hybrid mesh."""

    def __init__(self, mesh: HybridMesh, coeffs: CoefficientField):
        if len(coeffs.eps) != mesh.fem.n_nodes:
            raise SolverError("coefficients do not match the FE mesh")
        if not coeffs.within_bounds(1e-12):
            raise SolverError("coefficients violate their bounds")
        self.mesh = mesh
        self.coeffs = coeffs
        self.dim = d = mesh.dim
        fem = mesh.fem
        self.grads = p1_gradients(fem)
        stiff = sp.kron(scalar_stiffness(fem, self.grads), sp.identity(d), format="csr")
        free = mesh.fem_free
        self.free = free
        self.free_dofs = (free[:, None] * d + np.arange(d)).ravel()
        divdiv = divdiv_matrix(fem, coeffs.eps, self.grads)
        a_fem = (stiff + divdiv).tocsr()
        self.a_free = a_fem[self.free_dofs]
        self.mass_free = weighted_lumped_mass(fem, coeffs.eps)[free]
        self.damp_free = weighted_lumped_mass(fem, coeffs.sigma)[free]
        grid = mesh.grid
        self.mass_fd = grid.lumped_mass
        self.damp_fd = grid.boundary_measure
        self.fem_bnd = mesh.overlap.fem_to_fd[:, 0]
        self.fem_bnd_grid = mesh.overlap.fem_to_fd[:, 1]
        self.covered = mesh.overlap.fd_to_fem[:, 0]
        self.covered_fem = mesh.overlap.fd_to_fem[:, 1]
        self.extra = np.flatnonzero(mesh.fem_grid_index < 0)
        # div-term rows of the interface nodes: the FD equations there pick
        # them up so the coupled operator is the symmetric Galerkin one
        self.bnd_dofs = (self.fem_bnd[:, None] * d + np.arange(d)).ravel()
        self.divdiv_bnd = divdiv[self.bnd_dofs]

    def interface_div_load(self, v_fem: np.ndarray) -> np.ndarray:
        """-(div-term rows) @ E at the interface nodes, shape (n_bnd, d)."""
        return -(self.divdiv_bnd @ v_fem.reshape(-1)).reshape(-1, self.dim)

    # -- union node set: grid nodes, then FE-only nodes --------------------

    def to_union(self, u_grid: np.ndarray, v_fem: np.ndarray) -> np.ndarray:
        return np.concatenate([u_grid, v_fem[self.extra]], axis=0)

    @cached_property
    def union_mass(self) -> np.ndarray:
        m = np.empty(self.mesh.n_union)
        m[: self.mesh.grid.n_nodes] = self.mass_fd
        m[self.mesh.union_index[self.free]] = self.mass_free
        return m

    @cached_property
    def union_damping(self) -> np.ndarray:
        c = np.empty(self.mesh.n_union)
        c[: self.mesh.grid.n_nodes] = self.damp_fd
        c[self.mesh.union_index[self.free]] = self.damp_free
        return c

    @cached_property
    def union_load_mass(self) -> np.ndarray:
        """Unweighted lumped mass used to turn a forcing density into a load."""
        m = np.empty(self.mesh.n_union)
        m[: self.mesh.grid.n_nodes] = self.mass_fd
        m[self.mesh.union_index[self.free]] = self.mesh.fem.lumped_mass[self.free]
        return m

    @cached_property
    def union_operator(self) -> sp.csr_matrix:
        """Stiffness A of the coupled recurrence on union dofs (node-major)."""
        d = self.dim
        mesh = self.mesh
        n_dof = mesh.n_union * d
        kfd = sp.kron(fd_matrix(mesh.grid), sp.identity(d), format="csr").tocoo()
        owned = np.zeros(mesh.grid.n_nodes * d, dtype=bool)
        owned[(mesh.fd_owned[:, None] * d + np.arange(d)).ravel()] = True
        keep = owned[kfd.row]
        rows = [kfd.row[keep]]
        cols = [kfd.col[keep]]
        vals = [kfd.data[keep]]
        fem_dof_to_union = (mesh.union_index[:, None] * d + np.arange(d)).ravel()
        for block, row_dofs in ((self.a_free, self.free_dofs), (self.divdiv_bnd, self.bnd_dofs)):
            b = block.tocoo()
            rows.append(fem_dof_to_union[row_dofs[b.row]])
            cols.append(fem_dof_to_union[b.col])
            vals.append(b.data)
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_dof, n_dof),
        )

    @cached_property
    def union_operator_t(self) -> sp.csr_matrix:
        return self.union_operator.T.tocsr()

    def stable_dt(self) -> float:
        """Leapfrog limit 2 / sqrt(lambda_max(M^-1 A_sym))."""
        a = self.union_operator
        a_sym = 0.5 * (a + a.T)
        s = 1.0 / np.sqrt(np.repeat(self.union_mass, self.dim))
        op = sp.diags(s) @ a_sym @ sp.diags(s)
        if op.shape[0] < 50:
            lam = float(np.max(np.linalg.eigvalsh(op.toarray())))
        else:
            lam = float(eigsh(op, k=1, which="LA", return_eigenvectors=False, tol=1e-6)[0])
        return 2.0 / math.sqrt(lam)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def _leapfrog(mass, damp, prev, curr, a_curr, dt, load=None, velocity=None):
    """One explicit step for rows with lumped mass/damping (arrays (n,) and (n, d))."""
    m = mass[:, None]
    c = damp[:, None]
    rhs = -a_curr if load is None else load - a_curr
    if prev is None:
        f1 = np.zeros_like(curr) if velocity is None else velocity
        return curr + dt * f1 + (0.5 * dt**2) * (rhs - c * f1) / m
    return (2 * m / dt**2 * curr - (m / dt**2 - c / (2 * dt)) * prev + rhs) / (m / dt**2 + c / (2 * dt))


def _check_finite(arr: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalInstability(step)


def step_fdm(prev, curr, grid: StructuredGrid, dt: float, interface_data=None,
             load=None, velocity=None, step: int = 0) -> np.ndarray:
    """Leapfrog step of the FD subsystem on every grid node.

    Interior nodes get the standard second-order update; outer-boundary nodes
    carry half-cell masses and the boundary measure as damping, which is the
    first-order absorbing condition dE/dn = -dE/dt.  ``interface_data`` is an
    ``(indices, values)`` pair written over the result (FE values on covered
    nodes).  ``prev=None`` takes the first step from ``velocity``.
    """
    nxt = _leapfrog(grid.lumped_mass, grid.boundary_measure, prev, curr,
                    fd_laplacian(grid, curr), dt, load, velocity)
    if interface_data is not None:
        idx, vals = interface_data
        nxt[idx] = vals
    _check_finite(nxt, step)
    return nxt


def step_fem(prev, curr, system: HybridSystem, dt: float, interface_data=None,
             load=None, velocity=None, step: int = 0) -> np.ndarray:
    """Leapfrog step of the P1 subsystem at FE nodes off the interface.

    ``curr`` holds every FE node; the interface nodes must already carry FD
    values.  ``interface_data`` fills the interface nodes of the result.
    """
    d = system.dim
    free = system.free
    a_curr = (system.a_free @ curr.reshape(-1)).reshape(-1, d)
    nxt = np.zeros_like(curr)
    nxt[free] = _leapfrog(
        system.mass_free, system.damp_free,
        None if prev is None else prev[free], curr[free], a_curr, dt,
        None if load is None else load[free],
        None if velocity is None else velocity[free],
    )
    if interface_data is not None:
        idx, vals = interface_data
        nxt[idx] = vals
    _check_finite(nxt, step)
    return nxt


def _blowup_scale(f0, f1, T) -> float:
    return max(float(np.max(np.abs(f0), initial=0.0)), T * float(np.max(np.abs(f1), initial=0.0)))


def solve_forward(
    mesh: HybridMesh,
    coeffs: CoefficientField,
    pulse: SourcePulse,
    tg: TimeGrid,
    *,
    check_cfl: bool = True,
    region: str = "fem",
    on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
    system: HybridSystem | None = None,
    blowup: float = 1e8,
) -> tuple[FieldHistory, BoundaryTrace]:
    """March the coupled FD/FE system; returns the FE (or union) history and Gamma trace.

    ``on_step(n, E^n, E^{n+1})`` receives union-node states after each step.
    """
    system = system or HybridSystem(mesh, coeffs)
    if check_cfl:
        limit = system.stable_dt()
        if tg.dt > limit * (1 + 1e-9):
            raise CflViolation(f"dt={tg.dt:.6g} exceeds the stability limit {limit:.6g}")
    grid, fem = mesh.grid, mesh.fem
    d = mesh.dim
    f0_g, f1_g = pulse.initial(grid.coords)
    f0_f, f1_f = pulse.initial(fem.nodes)
    gamma = mesh.outer_boundary_nodes
    union = region == "union"
    n_store = mesh.n_union if union else fem.n_nodes
    hist = np.empty((tg.steps + 1, n_store, d))
    trace = np.empty((tg.steps + 1, len(gamma), d))

    def loads(t):
        lg, lf = pulse.load(grid.coords, t), pulse.load(fem.nodes, t)
        if lg is None:
            return None, None
        return grid.lumped_mass[:, None] * lg, fem.lumped_mass[:, None] * lf

    u_prev, v_prev = None, None
    u_curr, v_curr = f0_g.copy(), f0_f.copy()
    # the FE interface must agree with the FD values from the start
    v_curr[system.fem_bnd] = u_curr[system.fem_bnd_grid]
    u_curr[system.covered] = v_curr[system.covered_fem]
    scale = _blowup_scale(f0_g, f1_g, tg.T)
    if pulse.forcing is not None:
        peak = max(float(np.max(np.abs(loads(t)[0] / grid.lumped_mass[:, None])))
                   for t in tg.times[:: max(1, tg.steps // 16)])
        scale = max(scale, tg.T**2 * peak)
    scale = max(scale, 1e-300)

    def store(n, u, v):
        hist[n] = system.to_union(u, v) if union else v
        trace[n] = u[gamma]

    store(0, u_curr, v_curr)
    for n in range(tg.steps):
        lg, lf = loads(n * tg.dt)
        first = n == 0
        v_next = step_fem(v_prev, v_curr, system, tg.dt, load=lf,
                          velocity=f1_f if first else None, step=n + 1)
        if system.divdiv_bnd.nnz:
            lg = np.zeros_like(u_curr) if lg is None else lg.copy()
            lg[system.fem_bnd_grid] += system.interface_div_load(v_curr)
        u_next = step_fdm(u_prev, u_curr, grid, tg.dt,
                          interface_data=(system.covered, v_next[system.covered_fem]),
                          load=lg, velocity=f1_g if first else None, step=n + 1)
        v_next[system.fem_bnd] = u_next[system.fem_bnd_grid]
        amp = float(np.max(np.abs(u_next)))
        if amp > blowup * scale:
            raise NumericalInstability(n + 1, f"amplitude {amp:.3g}")
        if on_step is not None:
            on_step(n, system.to_union(u_curr, v_curr), system.to_union(u_next, v_next))
        store(n + 1, u_next, v_next)
        u_prev, v_prev, u_curr, v_curr = u_curr, v_curr, u_next, v_next
    coords = mesh.union_coords if union else fem.nodes
    return FieldHistory(hist, coords, tg, region), BoundaryTrace(trace, gamma, tg)


def solve_forward_fd(grid: StructuredGrid, pulse: SourcePulse, tg: TimeGrid) -> FieldHistory:
    """Pure FD reference run (eps = 1, sigma = 0 everywhere) on the whole grid."""
    f0, f1 = pulse.initial(grid.coords)
    hist = np.empty((tg.steps + 1, grid.n_nodes, grid.dim))
    hist[0] = f0
    prev, curr = None, f0
    for n in range(tg.steps):
        load = pulse.load(grid.coords, n * tg.dt)
        if load is not None:
            load = grid.lumped_mass[:, None] * load
        nxt = step_fdm(prev, curr, grid, tg.dt, load=load,
                       velocity=f1 if n == 0 else None, step=n + 1)
        hist[n + 1] = nxt
        prev, curr = curr, nxt
    return FieldHistory(hist, grid.coords, tg, "grid")


def solve_forward_union(system: HybridSystem, pulse: SourcePulse, tg: TimeGrid) -> np.ndarray:
    """The same recurrence marched with the assembled union operator.

    Used to cross-check the split FD/FE stepping; returns (steps+1, n_union, d).
    """
    mesh, d = system.mesh, system.dim
    x = mesh.union_coords
    f0, f1 = pulse.initial(x)
    m, c = system.union_mass, system.union_damping
    a = system.union_operator
    hist = np.empty((tg.steps + 1, mesh.n_union, d))
    hist[0] = f0
    prev, curr = None, f0
    for n in range(tg.steps):
        load = pulse.load(x, n * tg.dt)
        if load is not None:
            load = system.union_load_mass[:, None] * load
        a_curr = (a @ curr.reshape(-1)).reshape(-1, d)
        nxt = _leapfrog(m, c, prev, curr, a_curr, tg.dt, load, f1 if n == 0 else None)
        hist[n + 1] = nxt
        prev, curr = curr, nxt
    return hist


def solve_adjoint(
    mesh: HybridMesh,
    coeffs: CoefficientField,
    residual: BoundaryTrace,
    z: np.ndarray,
    tg: TimeGrid,
    *,
    region: str = "fem",
    system: HybridSystem | None = None,
) -> FieldHistory:
    """Backward march of the discrete adjoint with terminal data lambda = 0.

    Boundary forcing is the z-weighted residual (E - E_obs) on the outer
    boundary, i.e. the derivative of the trapezoidal misfit
    1/2 sum_k w_k z_k |r^k|^2_Gamma.  lambda^n multiplies the step equation
    centred at t_n; lambda^N is zero.
    """
    system = system or HybridSystem(mesh, coeffs)
    z = np.asarray(z, float)
    if residual.values.shape[0] != tg.steps + 1 or z.shape != (tg.steps + 1,):
        raise SolverError("residual / time weight do not match the time grid")
    if not np.all(np.isfinite(z)):
        raise SolverError("time weight must be finite")
    d = mesh.dim
    n_u = mesh.n_union
    dt = tg.dt
    nsteps = tg.steps
    mass = np.repeat(system.union_mass, d)
    damp = np.repeat(system.union_damping, d)
    at = system.union_operator_t
    w = tg.trapezoid_weights() * z
    gamma_dofs = (residual.nodes[:, None] * d + np.arange(d)).ravel()
    bmeas = np.repeat(mesh.grid.boundary_measure[residual.nodes], d)
    p_coef = mass / dt**2 + damp / (2 * dt)
    q_coef = mass / dt**2 - damp / (2 * dt)
    lam = np.zeros((nsteps + 1, n_u * d))
    for k in range(nsteps, 0, -1):
        rhs = np.zeros(n_u * d)
        rhs[gamma_dofs] = -(w[k] / dt) * bmeas * residual.values[k].reshape(-1)
        if k <= nsteps - 1:
            rhs -= at @ lam[k] - (2 * mass / dt**2) * lam[k]
        if k + 1 <= nsteps - 1:
            rhs -= q_coef * lam[k + 1]
        lam[k - 1] = rhs / (p_coef if k - 1 >= 1 else 2 * mass / dt**2)
        if not np.all(np.isfinite(lam[k - 1])):
            raise NumericalInstability(k - 1, "adjoint")
    lam = lam.reshape(nsteps + 1, n_u, d)
    if region == "union":
        return FieldHistory(lam, mesh.union_coords, tg, "union")
    return FieldHistory(lam[:, mesh.union_index], mesh.fem.nodes, tg, "fem")


def discrete_energy(prev: np.ndarray, curr: np.ndarray, system: HybridSystem, dt: float) -> float:
    """Staggered leapfrog energy of a union-state pair (E^n, E^{n+1}).

    1/2 |v|_M^2 + 1/2 E^{n+1} . A_sym E^n with v = (E^{n+1} - E^n)/dt; the
    second term is the gradient plus div-div energy.  Conserved exactly by the
    undamped scheme when A is symmetric, non-increasing with damping.
    """
    d = system.dim
    v = (curr - prev).reshape(-1) / dt
    mass = np.repeat(system.union_mass, d)
    a = system.union_operator
    x, y = curr.reshape(-1), prev.reshape(-1)
    pot = 0.5 * (x @ (a @ y) + y @ (a @ x))
    return float(0.5 * v @ (mass * v) + 0.5 * pot)


def divergence_residual(hist: FieldHistory, system: HybridSystem) -> np.ndarray:
    """L2(FE region) norm of div E at each time step (reported, not enforced)."""
    fem = system.mesh.fem
    div = element_divergence(system.grads, fem.elements, hist.values)
    return np.sqrt(np.sum(fem.volumes * div**2, axis=-1))


__all__ = [
    "BoundaryTrace", "CflViolation", "FieldHistory", "HybridSystem", "NumericalInstability",
    "SolverError", "SourcePulse", "TimeGrid", "cfl_dt", "discrete_energy", "divergence_residual",
    "fd_laplacian", "fd_matrix", "solve_adjoint", "solve_forward", "solve_forward_fd",
    "solve_forward_union", "step_fdm", "step_fem",
]
