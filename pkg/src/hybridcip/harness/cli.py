"""Command line front end: forward, make-obs, invert, phantom.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..artifacts import fmt, iteration_log_csv, load_trace, write_trace_csv, write_vtk_fem, write_vtk_grid
from ..grid_mesh import MeshError
from ..inversion import make_observations, run_acga, run_cga
from ..media import MediaError
from ..wavesolver import SolverError, solve_forward
from .config import ConfigError, RunConfig, load_config
from .experiment import Experiment, acga_config, cga_config, make_phantom, true_coefficients

logger = logging.getLogger("hybridcip")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out) if args.out else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, cfg: RunConfig, args, timings: dict, extra=None) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.raw,
        "seed": cfg.seed,
        "adaptive": bool(getattr(args, "adaptive", False)),
        "versions": {"hybridcip": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timings_s": timings,
    }
    doc.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")


def cmd_forward(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    exp = Experiment.from_config(cfg)
    coeffs = true_coefficients(cfg, exp.mesh)
    out = _out_dir(cfg, args)
    snaps = []
    every = cfg.snapshot_every

    def on_step(n, _, nxt):
        if every and (n + 1) % every == 0:
            snaps.append((n + 1, nxt.copy()))

    hist, trace = solve_forward(exp.mesh, coeffs, exp.pulse, exp.tg, on_step=on_step)
    write_trace_csv(out / "trace.csv", trace, exp.mesh.grid.coords, {"dt": fmt(exp.tg.dt)})
    grid = exp.mesh.grid
    for n, union in snaps:
        write_vtk_grid(out / f"fd_E_{n:06d}.vtk", grid, {"E": union[: grid.n_nodes]})
        write_vtk_fem(out / f"fe_E_{n:06d}.vtk", exp.mesh.fem, {"E": hist.values[n]})
    _manifest(out, "forward", cfg, args, {"total": time.perf_counter() - t0},
              {"steps": exp.tg.steps, "dt": exp.tg.dt})
    print(f"forward: {exp.tg.steps} steps, trace written to {out / 'trace.csv'}")
    return EXIT_OK


def cmd_make_obs(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    exp = Experiment.from_config(cfg)
    data_mesh = exp.data_mesh()
    coeffs = true_coefficients(cfg, data_mesh)
    obs = make_observations(data_mesh, coeffs, exp.pulse, exp.tg, cfg.delta, cfg.seed)
    out = _out_dir(cfg, args)
    meta = {"seed": cfg.seed, "delta": fmt(cfg.delta), "dt": fmt(exp.tg.dt),
            "data_refinements": cfg.data_refinements}
    write_trace_csv(out / "obs.csv", obs, exp.mesh.grid.coords, meta)
    _manifest(out, "make-obs", cfg, args, {"total": time.perf_counter() - t0},
              {"steps": exp.tg.steps, "dt": exp.tg.dt, "data_fem_nodes": data_mesh.fem.n_nodes})
    print(f"make-obs: delta={cfg.delta} seed={cfg.seed}, written to {out / 'obs.csv'}")
    return EXIT_OK


def _write_level(out: Path, level: int, mesh, state) -> None:
    write_vtk_fem(out / f"level_{level}_fields.vtk", mesh.fem,
                  {"eps": state.eps, "sigma": state.sigma}, title=f"level {level}")


def cmd_invert(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    if not args.obs:
        raise ConfigError("invert needs --obs <path>")
    exp = Experiment.from_config(cfg)
    try:
        obs, meta = load_trace(args.obs, exp.tg, exp.mesh.outer_boundary_nodes)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"observations rejected: {exc}") from None
    problem, init = exp.problem(obs)
    out = _out_dir(cfg, args)
    if args.adaptive:
        levels = run_acga(acga_config(cfg), problem, init)
        pairs = [(lv.mesh, lv.state) for lv in levels]
    else:
        pairs = [(exp.mesh, run_cga(problem, init, cga_config(cfg)))]
    rows = []
    for level, (mesh, state) in enumerate(pairs):
        _write_level(out, level, mesh, state)
        rows += state.log
    (out / "iteration_log.csv").write_text(iteration_log_csv(rows))
    mesh, final = pairs[-1]
    i = int(np.argmax(final.eps))
    summary = {
        "final_J": final.J_history[-1],
        "max_eps": float(final.eps[i]),
        "argmax_eps": mesh.fem.nodes[i].tolist(),
        "stop_reason": final.stop_reason.value,
        "iterations": final.m,
        "levels": [{"level": k, "fem_nodes": m.fem.n_nodes, "J": s.J_history[-1],
                    "stop_reason": s.stop_reason.value} for k, (m, s) in enumerate(pairs)],
        "obs_meta": meta,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _manifest(out, "invert", cfg, args, {"total": time.perf_counter() - t0}, {"obs": str(args.obs)})
    print(f"invert: J={summary['final_J']:.6e} max eps={summary['max_eps']:.4f} "
          f"stop={summary['stop_reason']} levels={len(pairs)}")
    return EXIT_OK


def cmd_phantom(cfg: RunConfig, args) -> int:
    ph = make_phantom(cfg)
    out = _out_dir(cfg, args)
    ph.write(out / "phantom.txt")
    _manifest(out, "phantom", cfg, args, {})
    print(f"phantom: {ph.dims} voxels written to {out / 'phantom.txt'}")
    return EXIT_OK


COMMANDS = {"forward": cmd_forward, "make-obs": cmd_make_obs, "invert": cmd_invert, "phantom": cmd_phantom}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridcip", description="Hybrid FE/FD Maxwell coefficient inversion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML run configuration (default: packaged 2D twin experiment)")
        s.add_argument("--out", help="output directory (default: [output] dir)")
        s.add_argument("--seed", type=int, help="override observations.seed")
        if name == "invert":
            s.add_argument("--obs", help="observation CSV from make-obs")
            s.add_argument("--adaptive", action="store_true", help="run the adaptive algorithm")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
            cfg.raw.setdefault("observations", {})["seed"] = args.seed
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, MeshError, MediaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
