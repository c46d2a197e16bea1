"""Coefficient model: tissue tables, voxel phantoms and admissible fields."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .grid_mesh import HybridMesh

logger = logging.getLogger(__name__)

BACKGROUND_MEDIA = -1.0


class MediaError(ValueError):
    pass


@dataclass(frozen=True)
class MediaRow:
    media: float
    tissue: str
    eps: float
    sigma: float


@dataclass(frozen=True)
class MediaTable:
    rows: tuple[MediaRow, ...]

    def __post_init__(self):
        nums = [r.media for r in self.rows]
        if len(set(nums)) != len(nums):
            raise MediaError("duplicate media numbers in table")
        for r in self.rows:
            if r.eps < 1 or r.sigma < 0:
                raise MediaError(f"media {r.media}: need eps >= 1 and sigma >= 0")

    @classmethod
    def from_csv(cls, source) -> "MediaTable":
        """Read a ``media,tissue,eps,sigma`` CSV from a path or text."""
        if isinstance(source, (str, Path)) and Path(source).exists():
            text = Path(source).read_text()
        else:
            text = str(source)
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["media", "tissue", "eps", "sigma"]:
            raise MediaError("media table header must be media,tissue,eps,sigma")
        rows = [
            MediaRow(float(r["media"]), r["tissue"].strip(), float(r["eps"]), float(r["sigma"]))
            for r in reader
        ]
        return cls(tuple(rows))

    @classmethod
    def default(cls) -> "MediaTable":
        """Breast tissue table with unweighted properties at 6 GHz."""
        text = resources.files("hybridcip.data").joinpath("media_table.csv").read_text()
        return cls.from_csv(text)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["media", "tissue", "eps", "sigma"])
        for r in self.rows:
            w.writerow([_fmt_media(r.media), r.tissue, repr(r.eps), repr(r.sigma)])
        return buf.getvalue()

    def lookup(self, media: float) -> MediaRow:
        for r in self.rows:
            if np.isclose(r.media, media, atol=1e-9):
                return r
        raise MediaError(f"unknown media number {media}")


def _fmt_media(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


@dataclass(frozen=True, eq=False)
class VoxelPhantom:
    """Voxel grid of media numbers; voxel (i, j[, k]) spans origin + [i, i+1) * spacing."""

    media: np.ndarray
    spacing: float
    origin: np.ndarray

    @property
    def dims(self) -> tuple[int, ...]:
        return self.media.shape

    @property
    def dim(self) -> int:
        return self.media.ndim

    def to_text(self) -> str:
        lines = [
            "dims " + " ".join(str(n) for n in self.dims),
            f"spacing {self.spacing!r}",
        ]
        if np.any(self.origin != 0):
            lines.append("origin " + " ".join(repr(float(o)) for o in self.origin))
        flat = self.media.reshape(-1, self.dims[-1])
        lines += [" ".join(_fmt_media(v) for v in row) for row in flat]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VoxelPhantom":
        """Parse ``dims nx ny [nz]``, ``spacing s``, optional ``origin``, then
        row-major (last axis fastest) media numbers."""
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if head[0] != "dims":
            raise MediaError("phantom file must start with 'dims'")
        dims = tuple(int(v) for v in head[1:])
        sp_line = lines[1].split()
        if sp_line[0] != "spacing":
            raise MediaError("second phantom line must be 'spacing s'")
        spacing = float(sp_line[1])
        body = 2
        origin = np.zeros(len(dims))
        if lines[2].split()[0] == "origin":
            origin = np.array([float(v) for v in lines[2].split()[1:]])
            body = 3
        vals = np.array(" ".join(lines[body:]).split(), dtype=float)
        if vals.size != int(np.prod(dims)):
            raise MediaError(f"expected {int(np.prod(dims))} media numbers, got {vals.size}")
        return cls(vals.reshape(dims), spacing, origin)

    @classmethod
    def read(cls, path) -> "VoxelPhantom":
        return cls.from_text(Path(path).read_text())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def centers(self) -> np.ndarray:
        axes = [self.origin[a] + self.spacing * (np.arange(n) + 0.5) for a, n in enumerate(self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class VoxelField:
    eps: np.ndarray
    sigma: np.ndarray
    spacing: float
    origin: np.ndarray


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Nodal permittivity and rescaled conductivity on the FE nodes.

    Outside the FE region both coefficients are 1 and 0 and are not stored.
    """

    eps: np.ndarray
    sigma: np.ndarray
    eps_max: float = 10.0
    sigma_max: float = 10.0

    def __post_init__(self):
        if self.eps.shape != self.sigma.shape:
            raise MediaError("eps and sigma must have the same shape")

    @classmethod
    def background(cls, n: int, eps_max: float = 10.0, sigma_max: float = 10.0) -> "CoefficientField":
        return cls(np.ones(n), np.zeros(n), eps_max, sigma_max)

    def within_bounds(self, tol: float = 0.0) -> bool:
        return bool(
            np.all(self.eps >= 1 - tol) and np.all(self.eps <= self.eps_max + tol)
            and np.all(self.sigma >= -tol) and np.all(self.sigma <= self.sigma_max + tol)
        )

    def with_values(self, eps=None, sigma=None) -> "CoefficientField":
        return replace(
            self,
            eps=self.eps if eps is None else np.asarray(eps, float),
            sigma=self.sigma if sigma is None else np.asarray(sigma, float),
        )


def project_bounds(field: CoefficientField) -> CoefficientField:
    """Clamp to 1 <= eps <= eps_max and 0 <= sigma <= sigma_max."""
    if not (np.isfinite(field.eps_max) and np.isfinite(field.sigma_max)):
        raise MediaError("coefficient bounds must be finite")
    if field.eps_max < 1 or field.sigma_max < 0:
        raise MediaError("need eps_max >= 1 and sigma_max >= 0")
    return field.with_values(
        np.clip(field.eps, 1.0, field.eps_max), np.clip(field.sigma, 0.0, field.sigma_max)
    )


def map_media(phantom: VoxelPhantom, table: MediaTable, weight: float = 1.0) -> VoxelField:
    """Voxelwise (eps/weight clamped at 1, sigma/weight) from media numbers."""
    if weight <= 0:
        raise MediaError("weight must be positive")
    eps = np.empty(phantom.dims)
    sigma = np.empty(phantom.dims)
    seen = np.zeros(phantom.dims, dtype=bool)
    for row in table.rows:
        hit = np.isclose(phantom.media, row.media, atol=1e-9)
        eps[hit] = max(row.eps / weight, 1.0)
        sigma[hit] = row.sigma / weight
        seen |= hit
    if not seen.all():
        bad = np.argwhere(~seen)[0]
        raise MediaError(
            f"unknown media number {phantom.media[tuple(bad)]} at voxel {tuple(int(b) for b in bad)}"
        )
    return VoxelField(eps, sigma, phantom.spacing, phantom.origin)


def sample_to_mesh(
    field: VoxelField,
    mesh: HybridMesh,
    stride: int = 1,
    eps_max: float = 10.0,
    sigma_max: float = 10.0,
) -> CoefficientField:
    """Nearest-voxel sampling onto the FE nodes after keeping every ``stride``-th voxel.

    The coarse voxel ``I`` is the fine voxel ``I * stride`` enlarged to
    ``stride * spacing``.  Nodes outside the phantom get the background and
    are counted in a warning.
    """
    if stride < 1:
        raise MediaError("stride must be a positive integer")
    coarse_eps = field.eps[tuple(slice(None, None, stride) for _ in field.eps.shape)]
    coarse_sig = field.sigma[tuple(slice(None, None, stride) for _ in field.sigma.shape)]
    cs = field.spacing * stride
    pts = mesh.fem.nodes
    rel = (pts - field.origin) / cs
    idx = np.floor(rel + 1e-9).astype(np.int64)
    dims = np.array(coarse_eps.shape)
    # a node on the far face of the phantom belongs to the last voxel
    on_far = np.isclose(rel, dims, atol=1e-9)
    idx = np.where(on_far, dims - 1, idx)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    eps = np.ones(len(pts))
    sigma = np.zeros(len(pts))
    if inside.any():
        sel = tuple(idx[inside].T)
        eps[inside] = coarse_eps[sel]
        sigma[inside] = coarse_sig[sel]
    if not inside.all():
        logger.warning("%d FE nodes outside the phantom set to background", int((~inside).sum()))
    return project_bounds(CoefficientField(eps, sigma, eps_max, sigma_max))


@dataclass(frozen=True)
class Shape:
    kind: str  # "box" or "ball"
    media: float
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()
    center: tuple[float, ...] = ()
    radius: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        kind = d["kind"]
        if kind == "box":
            return cls("box", float(d["media"]), lo=tuple(d["lo"]), hi=tuple(d["hi"]))
        if kind == "ball":
            return cls("ball", float(d["media"]), center=tuple(d["center"]), radius=float(d["radius"]))
        raise MediaError(f"unknown shape kind {kind!r}")

    def contains(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "box":
            return np.all((x >= np.array(self.lo)) & (x <= np.array(self.hi)), axis=-1)
        return np.linalg.norm(x - np.array(self.center), axis=-1) <= self.radius


def synthesize_phantom(shapes, dims, spacing: float, origin=None) -> VoxelPhantom:
    """Rasterise shapes by voxel centre; later shapes overwrite earlier ones."""
    dims = tuple(int(n) for n in dims)
    origin = np.zeros(len(dims)) if origin is None else np.asarray(origin, float)
    media = np.full(dims, BACKGROUND_MEDIA)
    ph = VoxelPhantom(media, float(spacing), origin)
    centers = ph.centers()
    for s in shapes:
        s = Shape.from_dict(s) if isinstance(s, dict) else s
        media[s.contains(centers)] = s.media
    return ph
