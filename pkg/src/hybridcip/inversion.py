"""Tikhonov objective, adjoint gradients, conjugate gradients and adaptivity."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import element_divergence, element_mean, element_to_node_average
from .grid_mesh import HybridMesh, MeshError, SimplicialMesh, mesh_h, refine_elements, transfer_field
from .media import CoefficientField, project_bounds
from .wavesolver import (
    BoundaryTrace,
    FieldHistory,
    HybridSystem,
    SourcePulse,
    TimeGrid,
    solve_adjoint,
    solve_forward,
)

logger = logging.getLogger(__name__)


class StopReason(str, enum.Enum):
    TOL_COEFF = "tol_coeff"
    TOL_GRAD = "tol_grad"
    MAX_ITER = "max_iter"
    RUNNING = "running"


@dataclass
class ObjectiveConfig:
    gamma_eps: float = 0.0
    gamma_sigma: float = 0.0
    eps_prior: np.ndarray | None = None
    sigma_prior: np.ndarray | None = None
    z_cutoff: float = 0.25
    obs_mask: np.ndarray | None = None  # over outer-boundary nodes; default all

    def __post_init__(self):
        if not (np.isfinite(self.gamma_eps) and np.isfinite(self.gamma_sigma)):
            raise ValueError("regularisation weights must be finite")
        if self.gamma_eps < 0 or self.gamma_sigma < 0:
            raise ValueError("regularisation weights must be non-negative")
        if not 0 < self.z_cutoff < 1:
            raise ValueError("z_cutoff must lie in (0, 1)")

    def priors(self, coeffs: CoefficientField) -> tuple[np.ndarray, np.ndarray]:
        e0 = coeffs.eps if self.eps_prior is None else self.eps_prior
        s0 = coeffs.sigma if self.sigma_prior is None else self.sigma_prior
        return np.asarray(e0, float), np.asarray(s0, float)

    def transferred(self, source: SimplicialMesh, target: SimplicialMesh) -> "ObjectiveConfig":
        move = lambda v: None if v is None else transfer_field(v, source, target)  # noqa: E731
        return replace(self, eps_prior=move(self.eps_prior), sigma_prior=move(self.sigma_prior))


@dataclass(frozen=True, eq=False)
class GradientFields:
    g_eps: np.ndarray
    g_sigma: np.ndarray


@dataclass
class CgaConfig:
    alpha_eps: float = 1.0
    alpha_sigma: float = 1.0
    eta1_eps: float = 1e-6
    eta2_eps: float = 1e-8
    eta1_sigma: float = 1e-6
    eta2_sigma: float = 1e-8
    M: int = 20
    freeze_sigma: bool = True
    backtracking: bool = False
    max_halvings: int = 10

    def __post_init__(self):
        if self.alpha_eps <= 0 or self.alpha_sigma <= 0:
            raise ValueError("step sizes must be positive")
        if min(self.eta1_eps, self.eta2_eps, self.eta1_sigma, self.eta2_sigma) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class AcgaConfig:
    beta: float = 0.7
    max_refinements: int = 2
    theta1_eps: float = 1e-6
    theta2_eps: float = 1e-8
    theta1_sigma: float = 1e-6
    theta2_sigma: float = 1e-8
    cga: CgaConfig = field(default_factory=CgaConfig)

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def time_weight_z(tg: TimeGrid, z_cutoff: float = 0.25) -> np.ndarray:
    """1 up to (1 - z_cutoff) T, then a cubic smoothstep down to 0 at T."""
    t = tg.times
    start = (1.0 - z_cutoff) * tg.T
    s = np.clip((t - start) / (z_cutoff * tg.T), 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


def _obs_weights(mesh: HybridMesh, trace: BoundaryTrace, cfg: ObjectiveConfig) -> np.ndarray:
    b = mesh.grid.boundary_measure[trace.nodes]
    if cfg.obs_mask is not None:
        b = b * np.asarray(cfg.obs_mask, float)
    return b


def misfit(trace: BoundaryTrace, obs: BoundaryTrace, z: np.ndarray, mesh: HybridMesh,
           cfg: ObjectiveConfig) -> float:
    if not trace.same_grid(obs):
        raise ValueError("trace and observations live on different grids")
    w = trace.tg.trapezoid_weights() * z
    b = _obs_weights(mesh, trace, cfg)
    r2 = np.sum((trace.values - obs.values) ** 2, axis=2)
    return 0.5 * float(np.sum(w[:, None] * b[None, :] * r2))


def tikhonov(trace: BoundaryTrace, obs: BoundaryTrace, z: np.ndarray, coeffs: CoefficientField,
             cfg: ObjectiveConfig, mesh: HybridMesh) -> float:
    """1/2 |E - E_obs|^2_{z, Gamma_T} + gamma/2 |eps - eps0|^2 + gamma/2 |sigma - sigma0|^2.

    Trapezoidal rule in time, lumped boundary and FE-mass quadrature in space.
    """
    e0, s0 = cfg.priors(coeffs)
    m = mesh.fem.lumped_mass
    reg = 0.5 * cfg.gamma_eps * float(m @ (coeffs.eps - e0) ** 2)
    reg += 0.5 * cfg.gamma_sigma * float(m @ (coeffs.sigma - s0) ** 2)
    return misfit(trace, obs, z, mesh, cfg) + reg


def l2_norm(values: np.ndarray, mesh: SimplicialMesh) -> float:
    return float(np.sqrt(mesh.lumped_mass @ values**2))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def assemble_gradients(
    E_hist: FieldHistory,
    lambda_hist: FieldHistory,
    coeffs: CoefficientField,
    cfg: ObjectiveConfig,
    pulse: SourcePulse,
    system: HybridSystem,
    reconstruct: np.ndarray | None = None,
    freeze_sigma: bool = False,
) -> GradientFields:
    """Pointwise gradient fields of the reduced functional on the FE nodes.

    g_eps = gamma (eps - eps0) - lambda(0) f1 - int (d_t lambda . d_t E - div lambda div E) dt
    g_sigma = gamma (sigma - sigma0) + int lambda . d_t E dt

    evaluated as the exact derivative of the discrete misfit: staggered
    differences for d_t lambda . d_t E (plus the O(dt) start-up term of the
    first step), central differences for d_t E in the sigma term, elementwise
    P1 divergences, all averaged to nodes with the same element weights as
    the lumped eps / sigma mass.  ``reconstruct`` masks the nodes that may
    change; gradients vanish elsewhere and on the FE interface.
    """
    mesh = system.mesh
    fem = mesh.fem
    tg = E_hist.tg
    dt = tg.dt
    E = E_hist.values
    lam = lambda_hist.values.copy()
    free = np.zeros(fem.n_nodes, dtype=bool)
    free[system.free] = True
    lam[:, ~free] = 0.0  # only FE rows carry coefficients
    _, f1 = pulse.initial(fem.nodes)

    dE = np.diff(E, axis=0) / dt  # staggered, n + 1/2
    dlam = np.diff(lam, axis=0) / dt
    s_eps = -np.einsum("nd,nd->n", lam[0], f1)
    s_eps += np.einsum("nd,nd->n", lam[0], dE[0] - f1)
    s_eps -= dt * np.einsum("knd,knd->n", dlam, dE)

    s_sig = dt * np.einsum("nd,nd->n", lam[0], f1)
    if tg.steps > 1:
        vel = (E[2:] - E[:-2]) / (2 * dt)
        s_sig += dt * np.einsum("knd,knd->n", lam[1:-1], vel)

    # the div term lives on interface rows too, so it uses the full multiplier
    div_l = element_divergence(system.grads, fem.elements, lambda_hist.values[:-1])
    div_e = element_divergence(system.grads, fem.elements, E[:-1])
    divdiv = dt * np.sum(div_l * div_e, axis=0)

    e0, s0 = cfg.priors(coeffs)
    m = fem.lumped_mass
    d_eps = element_to_node_average(fem, element_mean(s_eps, fem.elements) + divdiv)
    d_sig = element_to_node_average(fem, element_mean(s_sig, fem.elements))
    g_eps = d_eps / m + cfg.gamma_eps * (coeffs.eps - e0)
    g_sig = d_sig / m + cfg.gamma_sigma * (coeffs.sigma - s0)
    active = free if reconstruct is None else free & reconstruct
    g_eps = np.where(active, g_eps, 0.0)
    g_sig = np.where(active & (not freeze_sigma), g_sig, 0.0)
    return GradientFields(g_eps, g_sig)


# ---------------------------------------------------------------------------
# problem wrapper
# ---------------------------------------------------------------------------


@dataclass
class ForwardEval:
    J: float
    misfit: float
    trace: BoundaryTrace
    hist: FieldHistory
    system: HybridSystem


@dataclass
class InverseProblem:
    mesh: HybridMesh
    pulse: SourcePulse
    tg: TimeGrid
    obs: BoundaryTrace
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    reconstruct: np.ndarray | None = None  # FE nodes allowed to change

    def __post_init__(self):
        if self.obs.values.shape[0] != self.tg.steps + 1:
            raise ValueError("observations do not match the time grid")
        if not np.array_equal(self.obs.nodes, self.mesh.outer_boundary_nodes):
            raise ValueError("observations do not live on the outer boundary of this grid")

    @property
    def z(self) -> np.ndarray:
        return time_weight_z(self.tg, self.objective.z_cutoff)

    def forward(self, coeffs: CoefficientField, check_cfl: bool = False) -> ForwardEval:
        system = HybridSystem(self.mesh, coeffs)
        hist, trace = solve_forward(self.mesh, coeffs, self.pulse, self.tg, system=system,
                                    check_cfl=check_cfl)
        mis = misfit(trace, self.obs, self.z, self.mesh, self.objective)
        J = tikhonov(trace, self.obs, self.z, coeffs, self.objective, self.mesh)
        return ForwardEval(J, mis, trace, hist, system)

    def objective_value(self, coeffs: CoefficientField) -> float:
        return self.forward(coeffs).J

    def gradient(self, coeffs: CoefficientField, fwd: ForwardEval | None = None,
                 freeze_sigma: bool = False) -> GradientFields:
        fwd = fwd or self.forward(coeffs)
        residual = fwd.trace.values - self.obs.values
        if self.objective.obs_mask is not None:
            residual = residual * np.asarray(self.objective.obs_mask, float)[None, :, None]
        lam = solve_adjoint(self.mesh, coeffs, fwd.trace.with_values(residual), self.z, self.tg,
                            system=fwd.system)
        return assemble_gradients(fwd.hist, lam, coeffs, self.objective, self.pulse, fwd.system,
                                  self.reconstruct, freeze_sigma)

    def on_mesh(self, mesh: HybridMesh) -> "InverseProblem":
        """The same problem on a refined FE mesh; the FD grid and obs are shared."""
        rec = None
        if self.reconstruct is not None:
            rec = transfer_field(self.reconstruct.astype(float), self.mesh.fem, mesh.fem) > 0.5
        return replace(self, mesh=mesh, objective=self.objective.transferred(self.mesh.fem, mesh.fem),
                       reconstruct=rec)


def make_observations(mesh: HybridMesh, true_coeffs: CoefficientField, pulse: SourcePulse,
                      tg: TimeGrid, delta: float = 0.0, seed: int = 0) -> BoundaryTrace:
    """Boundary trace for the true coefficients with E (1 + delta u), u ~ U[-1, 1]."""
    if delta < 0:
        raise ValueError("noise level must be non-negative")
    _, trace = solve_forward(mesh, true_coeffs, pulse, tg)
    if delta == 0:
        return trace
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=trace.values.shape)
    return trace.with_values(trace.values * (1.0 + delta * u))


# ---------------------------------------------------------------------------
# conjugate gradients
# ---------------------------------------------------------------------------


@dataclass
class ReconstructionState:
    m: int
    coeffs: CoefficientField
    g_prev: GradientFields | None = None
    d_prev: GradientFields | None = None
    J_history: list[float] = field(default_factory=list)
    stop_reason: StopReason = StopReason.RUNNING
    log: list[dict] = field(default_factory=list)
    last_eval: ForwardEval | None = field(default=None, repr=False)
    level: int = 0

    @property
    def eps(self) -> np.ndarray:
        return self.coeffs.eps

    @property
    def sigma(self) -> np.ndarray:
        return self.coeffs.sigma


def initial_state(problem: InverseProblem, coeffs: CoefficientField, level: int = 0) -> ReconstructionState:
    coeffs = project_bounds(coeffs)
    ev = problem.forward(coeffs, check_cfl=True)
    return ReconstructionState(0, coeffs, J_history=[ev.J], last_eval=ev, level=level)


def check_stop(
    d_eps: float, d_sigma: float, g_eps: float, g_sigma: float, m: int, cfg: CgaConfig,
    tol1=None, tol2=None,
) -> tuple[bool, StopReason]:
    """(|d eps| < eta1_eps or |d sigma| < eta1_sigma) and (|g_eps| < eta2_eps or |g_sigma| < eta2_sigma).

    With ``freeze_sigma`` the sigma parts drop out (they would hold trivially).
    ``m`` counts the completed iterations; reaching ``M`` stops.
    """
    t1e, t1s = tol1 or (cfg.eta1_eps, cfg.eta1_sigma)
    t2e, t2s = tol2 or (cfg.eta2_eps, cfg.eta2_sigma)
    if cfg.freeze_sigma:
        coeff_ok = d_eps < t1e
        grad_ok = g_eps < t2e
        all_grads = grad_ok
    else:
        coeff_ok = d_eps < t1e or d_sigma < t1s
        grad_ok = g_eps < t2e or g_sigma < t2s
        all_grads = g_eps < t2e and g_sigma < t2s
    if coeff_ok and grad_ok:
        return True, StopReason.TOL_GRAD if all_grads else StopReason.TOL_COEFF
    if m >= cfg.M:
        return True, StopReason.MAX_ITER
    return False, StopReason.RUNNING


def _fr_direction(g: np.ndarray, g_prev, d_prev, mass: np.ndarray) -> tuple[np.ndarray, float]:
    if g_prev is None or d_prev is None:
        return -g, 0.0
    den = float(mass @ g_prev**2)
    if den == 0.0:
        return -g, 0.0
    beta = float(mass @ g**2) / den
    return -g + beta * d_prev, beta


def cga_iterate(state: ReconstructionState, problem: InverseProblem, cfg: CgaConfig) -> ReconstructionState:
    """One CGA cycle: forward, adjoint, gradients, Fletcher-Reeves step, projection."""
    mesh = problem.mesh.fem
    ev = state.last_eval or problem.forward(state.coeffs)
    g = problem.gradient(state.coeffs, ev, freeze_sigma=cfg.freeze_sigma)
    mass = mesh.lumped_mass
    gp, dp = state.g_prev, state.d_prev
    d_eps, beta_eps = _fr_direction(g.g_eps, gp and gp.g_eps, dp and dp.g_eps, mass)
    d_sig, beta_sig = _fr_direction(g.g_sigma, gp and gp.g_sigma, dp and dp.g_sigma, mass)
    if cfg.freeze_sigma:
        d_sig = np.zeros_like(d_sig)

    alpha_e, alpha_s = cfg.alpha_eps, cfg.alpha_sigma
    c = state.coeffs
    for halving in range(cfg.max_halvings + 1):
        new = project_bounds(c.with_values(c.eps + alpha_e * d_eps, c.sigma + alpha_s * d_sig))
        new_ev = problem.forward(new)
        if not cfg.backtracking or new_ev.J <= ev.J or halving == cfg.max_halvings:
            break
        alpha_e, alpha_s = alpha_e / 2, alpha_s / 2

    n_ge, n_gs = l2_norm(g.g_eps, mesh), l2_norm(g.g_sigma, mesh)
    inc_e, inc_s = l2_norm(new.eps - c.eps, mesh), l2_norm(new.sigma - c.sigma, mesh)
    stop, reason = check_stop(inc_e, inc_s, n_ge, n_gs, state.m + 1, cfg)
    if stop and reason is not StopReason.MAX_ITER and inc_e == 0 and inc_s == 0:
        new, new_ev = c, ev
    row = {
        "level": state.level, "m": state.m, "J": ev.J, "misfit": ev.misfit,
        "norm_g_eps": n_ge, "norm_g_sigma": n_gs, "max_eps": float(np.max(c.eps)),
        "beta_eps": beta_eps, "beta_sigma": beta_sig,
    }
    logger.info("level %d iter %d J=%.6e |g_eps|=%.3e max eps=%.4f", state.level, state.m, ev.J, n_ge, row["max_eps"])
    return ReconstructionState(
        m=state.m + 1,
        coeffs=new,
        g_prev=g,
        d_prev=GradientFields(d_eps, d_sig),
        J_history=state.J_history + [new_ev.J],
        stop_reason=reason,
        log=state.log + [row],
        last_eval=new_ev,
        level=state.level,
    )


def run_cga(problem: InverseProblem, coeffs: CoefficientField, cfg: CgaConfig,
            level: int = 0) -> ReconstructionState:
    state = initial_state(problem, coeffs, level)
    while state.stop_reason is StopReason.RUNNING:
        state = cga_iterate(state, problem, cfg)
    return state


# ---------------------------------------------------------------------------
# adaptivity
# ---------------------------------------------------------------------------


def refinement_indicator(eps: np.ndarray, sigma: np.ndarray, mesh: SimplicialMesh) -> np.ndarray:
    """|h eps| + |h sigma| per element, coefficients averaged over the element."""
    h = mesh_h(mesh)
    return np.abs(h * element_mean(eps, mesh.elements)) + np.abs(h * element_mean(sigma, mesh.elements))


def mark_for_refinement(eps: np.ndarray, sigma: np.ndarray, mesh: SimplicialMesh, beta: float,
                        eligible: np.ndarray | None = None) -> np.ndarray:
    """Elements whose indicator reaches ``beta`` times its maximum."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    ind = refinement_indicator(eps, sigma, mesh)
    if eligible is not None:
        ind = np.where(eligible, ind, -np.inf)
    return np.flatnonzero(ind >= beta * np.max(ind))


def interior_elements(mesh: SimplicialMesh) -> np.ndarray:
    """Elements with no node on the FE boundary."""
    return ~np.any(mesh.is_boundary_node[mesh.elements], axis=1)


@dataclass
class LevelResult:
    level: int
    mesh: HybridMesh
    state: ReconstructionState
    marked: np.ndarray | None = None


def run_acga(cfg: AcgaConfig, problem: InverseProblem, coeffs: CoefficientField) -> list[LevelResult]:
    """CGA to convergence, mark, refine, transfer, repeat.

    Refinement is restricted to elements away from the FE interface so new
    nodes never land on it; a failed refinement ends the loop with the last
    good level.  The time grid is shared by all levels and must already
    satisfy the CFL bound of the finest mesh.
    """
    results: list[LevelResult] = []
    prev_eps = prev_sig = None
    prev_mesh = None
    for level in range(cfg.max_refinements + 1):
        state = run_cga(problem, coeffs, cfg.cga, level=level)
        results.append(LevelResult(level, problem.mesh, state))
        fem = problem.mesh.fem
        if prev_mesh is not None:
            d_e = l2_norm(state.eps - transfer_field(prev_eps, prev_mesh, fem), fem)
            d_s = l2_norm(state.sigma - transfer_field(prev_sig, prev_mesh, fem), fem)
            last = state.log[-1] if state.log else {"norm_g_eps": 0.0, "norm_g_sigma": 0.0}
            stop, _ = check_stop(d_e, d_s, last["norm_g_eps"], last["norm_g_sigma"], 0,
                                 replace(cfg.cga, M=10**9),
                                 (cfg.theta1_eps, cfg.theta1_sigma), (cfg.theta2_eps, cfg.theta2_sigma))
            if stop:
                logger.info("ACGA converged at level %d", level)
                break
        if level == cfg.max_refinements:
            break
        marked = mark_for_refinement(state.eps, state.sigma, fem, cfg.beta, interior_elements(fem))
        results[-1].marked = marked
        try:
            new_fem = refine_elements(fem, marked)
            new_mesh = problem.mesh.with_fem(new_fem)
        except MeshError as exc:
            logger.warning("refinement failed at level %d (%s); keeping last good state", level, exc)
            break
        prev_eps, prev_sig, prev_mesh = state.eps, state.sigma, fem
        coeffs = project_bounds(state.coeffs.with_values(
            transfer_field(state.eps, fem, new_fem), transfer_field(state.sigma, fem, new_fem)))
        problem = problem.on_mesh(new_mesh)
    return results
