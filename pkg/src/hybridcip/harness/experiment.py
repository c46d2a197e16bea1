"""Turn a RunConfig into meshes, coefficients, pulses and inverse problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid_mesh import HybridMesh, build_hybrid_mesh, refine_elements
from ..inversion import (
    AcgaConfig,
    CgaConfig,
    InverseProblem,
    ObjectiveConfig,
    interior_elements,
)
from ..media import (
    CoefficientField,
    MediaTable,
    Shape,
    VoxelPhantom,
    map_media,
    project_bounds,
    sample_to_mesh,
    synthesize_phantom,
)
from ..wavesolver import BoundaryTrace, SourcePulse, TimeGrid, cfl_dt
from .config import ConfigError, RunConfig

_CGA_KEYS = {"alpha_eps", "alpha_sigma", "eta1_eps", "eta2_eps", "eta1_sigma", "eta2_sigma",
             "M", "freeze_sigma", "backtracking", "max_halvings"}
_ACGA_KEYS = {"beta", "max_refinements", "theta1_eps", "theta2_eps", "theta1_sigma", "theta2_sigma"}


def _checked(table: dict, allowed: set, name: str) -> dict:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return table


def build_mesh(cfg: RunConfig) -> HybridMesh:
    return build_hybrid_mesh(cfg.domain_box, cfg.fem_box, cfg.h)


def refine_inside(mesh: HybridMesh, times: int) -> HybridMesh:
    """Refine every FE element away from the interface ``times`` times."""
    for _ in range(times):
        mesh = mesh.with_fem(refine_elements(mesh.fem, np.flatnonzero(interior_elements(mesh.fem))))
    return mesh


def time_grid(cfg: RunConfig, mesh: HybridMesh) -> TimeGrid:
    return TimeGrid.from_dt(cfg.T, cfl_dt(mesh, cfg.cfl_safety) / 2**cfg.dt_levels)


def make_pulse(cfg: RunConfig) -> SourcePulse:
    p = dict(cfg.pulse)
    kind = p.pop("kind", "bump")
    try:
        if kind == "zero":
            return SourcePulse.zero(cfg.dim)
        if kind == "bump":
            return SourcePulse.bump(p["center"], float(p["width"]), p["polarization"],
                                    float(p.get("amplitude", 1.0)))
        return SourcePulse.plane(cfg.dim, int(p["axis"]), float(p["position"]), float(p["width"]),
                                 p["polarization"], float(p.get("amplitude", 1.0)))
    except KeyError as exc:
        raise ConfigError(f"pulse.{exc.args[0]} is required for kind={kind!r}") from None


def make_phantom(cfg: RunConfig) -> VoxelPhantom:
    ph = cfg.phantom
    if "file" in ph:
        return VoxelPhantom.read(ph["file"])
    return synthesize_phantom(ph.get("shapes", []), ph["dims"], float(ph["spacing"]), ph.get("origin"))


def media_table(cfg: RunConfig) -> MediaTable:
    return MediaTable.default() if cfg.media_table is None else MediaTable.from_csv(cfg.media_table)


def true_coefficients(cfg: RunConfig, mesh: HybridMesh) -> CoefficientField:
    field = map_media(make_phantom(cfg), media_table(cfg), cfg.weight)
    return sample_to_mesh(field, mesh, cfg.stride, cfg.eps_max, cfg.sigma_max)


def initial_coefficients(cfg: RunConfig, mesh: HybridMesh) -> CoefficientField:
    """eps0 inside the suspected region, 1 elsewhere; sigma from the phantom or a constant."""
    ini = cfg.initial
    x = mesh.fem.nodes
    inside = np.ones(len(x), dtype=bool)
    if "region" in ini:
        inside = Shape.from_dict(dict(ini["region"], media=0)).contains(x)
    eps0 = float(ini.get("eps0", 1.0))
    eps = np.where(inside, eps0, 1.0)
    sig = ini.get("sigma", "phantom")
    if sig == "phantom":
        sigma = true_coefficients(cfg, mesh).sigma
    elif isinstance(sig, (int, float)):
        sigma = np.full(len(x), float(sig))
    else:
        raise ConfigError(f"initial.sigma must be 'phantom' or a number, got {sig!r}")
    return project_bounds(CoefficientField(eps, sigma, cfg.eps_max, cfg.sigma_max))


def objective_config(cfg: RunConfig, prior: CoefficientField) -> ObjectiveConfig:
    o = _checked(dict(cfg.objective), {"gamma_eps", "gamma_sigma", "z_cutoff"}, "objective")
    try:
        return ObjectiveConfig(eps_prior=prior.eps, sigma_prior=prior.sigma, **o)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[objective]: {exc}") from None


def cga_config(cfg: RunConfig, overrides: dict | None = None) -> CgaConfig:
    try:
        return CgaConfig(**_checked(dict(cfg.cga, **(overrides or {})), _CGA_KEYS, "cga"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[cga]: {exc}") from None


def acga_config(cfg: RunConfig) -> AcgaConfig:
    a = dict(cfg.acga)
    cga_over = {k: a.pop(k) for k in list(a) if k in _CGA_KEYS}
    try:
        return AcgaConfig(cga=cga_config(cfg, cga_over), **_checked(a, _ACGA_KEYS, "acga"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[acga]: {exc}") from None


@dataclass
class Experiment:
    cfg: RunConfig
    mesh: HybridMesh
    tg: TimeGrid
    pulse: SourcePulse

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Experiment":
        mesh = build_mesh(cfg)
        return cls(cfg, mesh, time_grid(cfg, mesh), make_pulse(cfg))

    def data_mesh(self) -> HybridMesh:
        return refine_inside(self.mesh, self.cfg.data_refinements)

    def problem(self, obs: BoundaryTrace) -> tuple[InverseProblem, CoefficientField]:
        init = initial_coefficients(self.cfg, self.mesh)
        return InverseProblem(self.mesh, self.pulse, self.tg, obs, objective_config(self.cfg, init)), init
