"""Plain-text artifacts: legacy VTK fields, boundary-trace CSV and iteration logs."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .grid_mesh import SimplicialMesh, StructuredGrid
from .wavesolver import BoundaryTrace, TimeGrid


def fmt(x: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(x), ".17g")


def _vtk_point_data(point_data: dict[str, np.ndarray], n: int) -> list[str]:
    lines = [f"POINT_DATA {n}"]
    for name, vals in point_data.items():
        vals = np.asarray(vals, float)
        if vals.shape[0] != n:
            raise ValueError(f"field {name!r} has {vals.shape[0]} values for {n} points")
        if vals.ndim == 1:
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [fmt(v) for v in vals]
        else:
            vec = np.zeros((n, 3))
            vec[:, : vals.shape[1]] = vals
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(fmt(v) for v in row) for row in vec]
    return lines


def write_vtk_fem(path, mesh: SimplicialMesh, point_data: dict[str, np.ndarray], title="fields") -> None:
    """Legacy ASCII UNSTRUCTURED_GRID with triangles (5) or tetrahedra (10)."""
    pts = np.zeros((mesh.n_nodes, 3))
    pts[:, : mesh.dim] = mesh.nodes
    k = mesh.dim + 1
    cell_type = 5 if mesh.dim == 2 else 10
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [" ".join(fmt(v) for v in p) for p in pts]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (k + 1)}")
    lines += [f"{k} " + " ".join(str(int(i)) for i in el) for el in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(cell_type)] * mesh.n_elements
    lines += _vtk_point_data(point_data, mesh.n_nodes)
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtk_grid(path, grid: StructuredGrid, point_data: dict[str, np.ndarray], title="fields") -> None:
    """Legacy ASCII STRUCTURED_POINTS; values must be in the grid's C order."""
    dims = list(grid.shape) + [1] * (3 - grid.dim)
    origin = list(grid.origin) + [0.0] * (3 - grid.dim)
    # VTK walks x fastest, the grid stores the last axis fastest
    order = np.arange(grid.n_nodes).reshape(grid.shape).T.ravel()
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET STRUCTURED_POINTS",
             "DIMENSIONS " + " ".join(str(d) for d in dims),
             "ORIGIN " + " ".join(fmt(o) for o in origin),
             "SPACING " + " ".join(fmt(grid.h) for _ in range(3))]
    lines += _vtk_point_data({k: np.asarray(v)[order] for k, v in point_data.items()}, grid.n_nodes)
    Path(path).write_text("\n".join(lines) + "\n")


def trace_header(dim: int) -> list[str]:
    axes = "xyz"[:dim]
    return ["t", "node_id"] + list(axes) + [f"E{a}" for a in axes]


def trace_to_csv(trace: BoundaryTrace, coords: np.ndarray, meta: dict | None = None) -> str:
    """Rows ``t,node_id,x,y[,z],Ex,Ey[,Ez]``; ``meta`` goes into ``# key=value`` lines."""
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    dim = trace.values.shape[2]
    w.writerow(trace_header(dim))
    xs = coords[trace.nodes]
    for n, t in enumerate(trace.tg.times):
        for j, node in enumerate(trace.nodes):
            w.writerow([fmt(t), int(node), *map(fmt, xs[j]), *map(fmt, trace.values[n, j])])
    return buf.getvalue()


def write_trace_csv(path, trace: BoundaryTrace, coords: np.ndarray, meta: dict | None = None) -> None:
    Path(path).write_text(trace_to_csv(trace, coords, meta))


def read_trace_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Return (times, node ids, values (steps+1, n_nodes, d), meta)."""
    meta = {}
    body = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    header = rows[0]
    dim = (len(header) - 2) // 2
    if header != trace_header(dim):
        raise ValueError(f"unexpected trace header {header}")
    data = np.array(rows[1:], dtype=float)
    times = np.unique(data[:, 0])
    nodes = data[: len(data) // len(times), 1].astype(np.int64)
    if len(nodes) * len(times) != len(data):
        raise ValueError("trace CSV is not a full time x node table")
    values = data[:, 2 + dim:].reshape(len(times), len(nodes), dim)
    return times, nodes, values, meta


def load_trace(path, tg: TimeGrid, nodes: np.ndarray) -> tuple[BoundaryTrace, dict]:
    """Read a trace and check it lives on ``tg`` and the given boundary nodes."""
    times, ids, values, meta = read_trace_csv(path)
    if len(times) != tg.steps + 1 or not np.allclose(times, tg.times, rtol=0, atol=1e-12 * max(tg.T, 1)):
        raise ValueError(f"observation times ({len(times)} samples) do not match the configured time grid "
                         f"({tg.steps + 1} samples)")
    if not np.array_equal(ids, nodes):
        raise ValueError("observation nodes do not match the outer boundary of the configured grid")
    return BoundaryTrace(values, ids, tg), meta


def iteration_log_csv(rows: list[dict]) -> str:
    cols = ["level", "m", "J", "misfit", "norm_g_eps", "norm_g_sigma", "max_eps"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([int(r["level"]), int(r["m"]), *(fmt(r[c]) for c in cols[2:])])
    return buf.getvalue()
