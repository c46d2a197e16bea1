"""Hybrid FD/FE domain decomposition.

The FD grid covers the whole box; the FE mesh is the same grid restricted to
an inner box with every cell split into simplices (2 triangles per square,
6 Kuhn tetrahedra per cube), so every FE node on the inner box boundary is an
FD node as well and the interface exchange is a nodal copy.

Local refinement uses longest-edge bisection (Rivara).  An edge is always
split in every element sharing it, which keeps the mesh conforming, and each
element is split across its longest edge, which on the initial right
isosceles / Kuhn elements keeps the angles bounded away from zero.  A marked
element is bisected twice, so a marked triangle ends up as 4 children whose
diameter is half the parent's.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

REL_TOL = 1e-12


class MeshError(ValueError):
    """Invalid geometry or a mesh that breaks a structural invariant."""


class NodeClass(enum.IntEnum):
    OUTER_BOUNDARY = 0
    INTERFACE = 1
    INTERIOR = 2
    COVERED_BY_FEM = 3


# ---------------------------------------------------------------------------
# structured grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform tensor grid, node index = C-order ravel of (i_x, i_y[, i_z])."""

    origin: np.ndarray
    shape: tuple[int, ...]
    h: float
    classification: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def coords(self) -> np.ndarray:
        axes = [self.origin[a] + self.h * np.arange(n) for a, n in enumerate(self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def multi_index(self, flat: np.ndarray) -> tuple[np.ndarray, ...]:
        return np.unravel_index(flat, self.shape)

    def flat_index(self, *idx) -> np.ndarray:
        return np.ravel_multi_index(idx, self.shape)

    def index_of_points(self, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Grid index of each point, or -1 where the point is not a grid node."""
        pts = np.atleast_2d(pts)
        rel = (pts - self.origin) / self.h
        ijk = np.rint(rel)
        on_grid = np.all(np.abs(rel - ijk) < tol, axis=1)
        ijk = ijk.astype(np.int64)
        inside = np.all((ijk >= 0) & (ijk < np.array(self.shape)), axis=1)
        ok = on_grid & inside
        out = np.full(len(pts), -1, dtype=np.int64)
        if ok.any():
            out[ok] = np.ravel_multi_index(tuple(ijk[ok].T), self.shape)
        return out

    @cached_property
    def boundary_count(self) -> np.ndarray:
        """Number of axes along which each node sits on the outer boundary."""
        count = np.zeros(self.shape, dtype=np.int64)
        for a, n in enumerate(self.shape):
            sl = [slice(None)] * self.dim
            sl[a] = 0
            count[tuple(sl)] += 1
            sl[a] = n - 1
            count[tuple(sl)] += 1
        return count.ravel()

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """Q1-lumped nodal volumes, h^d halved once per boundary axis."""
        return self.h**self.dim * 0.5 ** self.boundary_count

    @cached_property
    def boundary_measure(self) -> np.ndarray:
        """Lumped (d-1)-measure of the outer boundary carried by each node."""
        d, h = self.dim, self.h
        meas = np.zeros(self.shape)
        # per-axis "is on boundary" flags, broadcast to the grid
        flags = []
        for a, n in enumerate(self.shape):
            f = np.zeros(n, dtype=bool)
            f[0] = f[-1] = True
            shape = [1] * d
            shape[a] = n
            flags.append(f.reshape(shape))
        for a in range(d):
            face_w = np.full(self.shape, h ** (d - 1))
            for b in range(d):
                if b != a:
                    face_w = face_w * np.where(flags[b], 0.5, 1.0)
            meas += np.where(flags[a], face_w, 0.0)
        return meas.ravel()

    @cached_property
    def all_edge_weights(self) -> tuple[np.ndarray, ...]:
        return tuple(self.edge_weights(a) for a in range(self.dim))

    def edge_weights(self, axis: int) -> np.ndarray:
        """Stiffness weight of each grid edge along ``axis``.

        Interior edges carry h^(d-2); edges lying on the outer boundary are
        shared by fewer cells and are halved once per boundary axis they sit on.
        """
        d = self.dim
        shape = list(self.shape)
        shape[axis] -= 1
        w = np.full(shape, self.h ** (d - 2))
        for b in range(d):
            if b == axis:
                continue
            f = np.ones(self.shape[b])
            f[0] = f[-1] = 0.5
            s = [1] * d
            s[b] = self.shape[b]
            w = w * f.reshape(s)
        return w


# ---------------------------------------------------------------------------
# simplicial mesh
# ---------------------------------------------------------------------------


def _simplex_volumes(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    d = nodes.shape[1]
    p0 = nodes[elements[:, 0]]
    jac = np.stack([nodes[elements[:, k + 1]] - p0 for k in range(d)], axis=2)
    return np.linalg.det(jac) / math.factorial(d)


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Conforming simplicial mesh (triangles in 2D, tetrahedra in 3D).

    ``nodes`` is (n, d), ``elements`` is (m, d+1) with positive orientation,
    ``generation`` counts how many bisections produced each element.
    """

    nodes: np.ndarray
    elements: np.ndarray
    generation: np.ndarray | None = None

    def __post_init__(self):
        if self.generation is None:
            object.__setattr__(self, "generation", np.zeros(len(self.elements), dtype=np.int64))
        if self.elements.shape[1] != self.dim + 1:
            raise MeshError("element arity does not match spatial dimension")
        vol = self.volumes
        if np.any(vol <= 0):
            raise MeshError(f"{int(np.sum(vol <= 0))} elements with non-positive volume")

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def volumes(self) -> np.ndarray:
        return _simplex_volumes(self.nodes, self.elements)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique sorted edges (k, 2)."""
        pairs = np.concatenate(
            [self.elements[:, [a, b]] for a, b in itertools.combinations(range(self.dim + 1), 2)]
        )
        return np.unique(np.sort(pairs, axis=1), axis=0)

    @cached_property
    def _faces_with_owner(self):
        d = self.dim
        faces, owner, opposite = [], [], []
        for k in range(d + 1):
            cols = [c for c in range(d + 1) if c != k]
            faces.append(self.elements[:, cols])
            owner.append(np.arange(self.n_elements))
            opposite.append(self.elements[:, k])
        return np.concatenate(faces), np.concatenate(owner), np.concatenate(opposite)

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """Faces that belong to exactly one element, (k, d)."""
        faces, _, _ = self._faces_with_owner
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        return faces[counts[inv] == 1]

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """Unit outward normals of ``boundary_faces``."""
        faces, _, opposite = self._faces_with_owner
        key = np.sort(faces, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        sel = counts[inv.ravel()] == 1
        bf, opp = faces[sel], opposite[sel]
        p = self.nodes
        if self.dim == 2:
            t = p[bf[:, 1]] - p[bf[:, 0]]
            n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        else:
            n = np.cross(p[bf[:, 1]] - p[bf[:, 0]], p[bf[:, 2]] - p[bf[:, 0]])
        inward = p[opp] - p[bf[:, 0]]
        flip = np.einsum("ij,ij->i", n, inward) > 0
        n[flip] *= -1
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_faces)

    @cached_property
    def is_boundary_node(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """Row-sum lumped P1 mass, sum over incident elements of |K|/(d+1)."""
        m = np.zeros(self.n_nodes)
        np.add.at(m, self.elements.ravel(), np.repeat(self.volumes / (self.dim + 1), self.dim + 1))
        return m

    def min_angle(self) -> float:
        """Smallest interior angle (2D) or dihedral angle (3D), in degrees."""
        p = self.nodes[self.elements]
        if self.dim == 2:
            angles = []
            for k in range(3):
                a = p[:, (k + 1) % 3] - p[:, k]
                b = p[:, (k + 2) % 3] - p[:, k]
                c = np.einsum("ij,ij->i", a, b) / (
                    np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
                )
                angles.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
            return float(np.min(angles))
        # dihedral angle along each of the 6 edges
        angles = []
        for i, j in itertools.combinations(range(4), 2):
            k, l = [c for c in range(4) if c not in (i, j)]
            e = p[:, j] - p[:, i]
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            u = p[:, k] - p[:, i]
            v = p[:, l] - p[:, i]
            u -= np.einsum("ij,ij->i", u, e)[:, None] * e
            v -= np.einsum("ij,ij->i", v, e)[:, None] * e
            c = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
        return float(np.min(angles))

    def nonconforming_faces(self) -> int:
        """Number of single-owner faces that do not lie on the bounding box.

        A hanging node leaves a face (edge in 2D) owned by one element in the
        middle of the mesh; for meshes of a box this count is zero exactly
        when the mesh is conforming.
        """
        faces, _, _ = self._faces_with_owner
        _, counts = np.unique(np.sort(faces, axis=1), axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("face shared by more than two elements")
        cent = self.nodes[self.boundary_faces].mean(axis=1)
        lo, hi = self.nodes.min(axis=0), self.nodes.max(axis=0)
        on_hull = np.any(np.isclose(cent, lo, atol=1e-12) | np.isclose(cent, hi, atol=1e-12), axis=1)
        return int(np.sum(~on_hull))


def structured_simplices(shape: tuple[int, ...]) -> np.ndarray:
    """Split every cell of a node grid of ``shape`` into simplices.

    Returns local node-grid flat indices (C order), positively oriented once
    combined with coordinates (checked by the caller).
    """
    d = len(shape)
    cells = np.stack(
        np.meshgrid(*[np.arange(n - 1) for n in shape], indexing="ij"), axis=-1
    ).reshape(-1, d)
    if d == 2:
        paths = [[(0, 0), (1, 0), (1, 1)], [(0, 0), (1, 1), (0, 1)]]
    elif d == 3:
        paths = []
        for perm in itertools.permutations(range(3)):
            v = [0, 0, 0]
            path = [tuple(v)]
            for a in perm:
                v[a] = 1
                path.append(tuple(v))
            paths.append(path)
    else:
        raise MeshError(f"unsupported dimension {d}")
    out = []
    for path in paths:
        verts = [np.ravel_multi_index(tuple((cells + np.array(o)).T), shape) for o in path]
        out.append(np.stack(verts, axis=1))
    return np.concatenate(out)


def _orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    vol = _simplex_volumes(nodes, elements)
    elements = elements.copy()
    neg = vol < 0
    elements[neg, 0], elements[neg, 1] = elements[neg, 1], elements[neg, 0].copy()
    return elements


def box_mesh(lo, hi, h: float) -> SimplicialMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    counts = _cell_counts(hi - lo, h)
    shape = tuple(int(c) + 1 for c in counts)
    axes = [lo[a] + h * np.arange(n) for a, n in enumerate(shape)]
    nodes = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    elements = _orient(nodes, structured_simplices(shape))
    return SimplicialMesh(nodes, elements, np.zeros(len(elements), dtype=np.int64))


def _cell_counts(length: np.ndarray, h: float, minimum: int = 1) -> np.ndarray:
    ratio = np.asarray(length, float) / h
    counts = np.rint(ratio)
    if np.any(np.abs(ratio - counts) > 1e-9 * np.maximum(1.0, ratio)) or np.any(counts < minimum):
        raise MeshError(f"box side lengths {length} are not integer multiples of h={h}")
    return counts.astype(np.int64)


# ---------------------------------------------------------------------------
# hybrid mesh
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlapMap:
    """Nodal correspondence between the FE mesh and the FD grid.

    ``fem_to_fd``: (fem node, fd node) for FE nodes on the FE boundary; these
    receive FD values.  ``fd_to_fem``: (fd node, fem node) for FD nodes
    strictly inside the FE box; these receive FE values.
    """

    fem_to_fd: np.ndarray
    fd_to_fem: np.ndarray


@dataclass(frozen=True, eq=False)
class HybridMesh:
    grid: StructuredGrid
    fem: SimplicialMesh
    overlap: OverlapMap
    domain_box: np.ndarray
    fem_box: np.ndarray

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def h_fdm(self) -> float:
        return self.grid.h

    @cached_property
    def outer_boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.grid.classification == NodeClass.OUTER_BOUNDARY)

    @cached_property
    def fem_grid_index(self) -> np.ndarray:
        """Grid index of each FE node, -1 for nodes created by refinement."""
        return self.grid.index_of_points(self.fem.nodes)

    @cached_property
    def fem_free(self) -> np.ndarray:
        """FE nodes updated by the FE scheme (everything off the FE boundary)."""
        return np.flatnonzero(~self.fem.is_boundary_node)

    @cached_property
    def fd_owned(self) -> np.ndarray:
        return np.flatnonzero(self.grid.classification != NodeClass.COVERED_BY_FEM)

    @cached_property
    def union_index(self) -> np.ndarray:
        """Index of each FE node in the union node set (grid nodes first)."""
        idx = self.fem_grid_index.copy()
        extra = idx < 0
        idx[extra] = self.grid.n_nodes + np.arange(int(extra.sum()))
        return idx

    @property
    def n_union(self) -> int:
        return self.grid.n_nodes + int(np.sum(self.fem_grid_index < 0))

    @cached_property
    def union_coords(self) -> np.ndarray:
        extra = self.fem_grid_index < 0
        return np.concatenate([self.grid.coords, self.fem.nodes[extra]])

    def with_fem(self, fem: SimplicialMesh) -> "HybridMesh":
        """Same FD grid with a (refined) FE mesh; the interface must still match."""
        return _assemble_hybrid(self.grid.origin, self.grid.shape, self.grid.h,
                                self.domain_box, self.fem_box, fem)

    def validate(self) -> None:
        g, fem = self.grid, self.fem
        lo, hi = self.fem_box
        if np.any(np.isclose(fem.nodes, self.domain_box[0]) | np.isclose(fem.nodes, self.domain_box[1])):
            raise MeshError("FE mesh touches the outer boundary")
        a, b = self.overlap.fem_to_fd.T
        scale = max(1.0, float(np.max(np.abs(self.domain_box))))
        if np.any(np.abs(fem.nodes[a] - g.coords[b]) > REL_TOL * scale):
            raise MeshError("FE boundary nodes do not coincide with FD nodes")
        c, e = self.overlap.fd_to_fem.T
        if np.any(np.abs(fem.nodes[e] - g.coords[c]) > REL_TOL * scale):
            raise MeshError("covered FD nodes do not coincide with FE nodes")
        vol = fem.volumes.sum()
        if not math.isclose(vol, float(np.prod(hi - lo)), rel_tol=1e-12):
            raise MeshError("FE mesh does not tile the FE box")


def build_hybrid_mesh(domain_box, fem_box, h: float) -> HybridMesh:
    """Build the FD grid on ``domain_box`` and the split FE mesh on ``fem_box``.

    Boxes are ``(lo, hi)`` pairs of length-d sequences.  ``fem_box`` must sit at
    least ``h`` inside ``domain_box`` on every side and both boxes must be
    integer multiples of ``h`` (measured from the domain origin).
    """
    dom = np.asarray(domain_box, dtype=float)
    fbox = np.asarray(fem_box, dtype=float)
    if dom.shape != fbox.shape or dom.shape[0] != 2 or dom.shape[1] not in (2, 3):
        raise MeshError("boxes must be (lo, hi) pairs in 2 or 3 dimensions")
    if h <= 0:
        raise MeshError("h must be positive")
    counts = _cell_counts(dom[1] - dom[0], h)
    for name, off in (("lower", fbox[0] - dom[0]), ("upper", dom[1] - fbox[1])):
        _cell_counts(off, h, minimum=0)
        if np.any(off < h - 1e-12 * h):
            raise MeshError(f"FE box {name} margin {off} is less than h={h}")
    fcounts = _cell_counts(fbox[1] - fbox[0], h)
    if np.any(fcounts < 2):
        raise MeshError("FE box must span at least two cells per axis (two-layer overlap)")
    shape = tuple(int(c) + 1 for c in counts)
    fem = box_mesh(fbox[0], fbox[1], h)
    return _assemble_hybrid(dom[0], shape, h, dom, fbox, fem)


def _assemble_hybrid(origin, shape, h, dom, fbox, fem: SimplicialMesh) -> HybridMesh:
    origin = np.asarray(origin, float)
    grid0 = StructuredGrid(origin, tuple(shape), float(h), np.zeros(0))
    coords = grid0.coords
    tol = 1e-9 * h
    cls = np.full(grid0.n_nodes, NodeClass.INTERIOR, dtype=np.int64)
    inside_closed = np.all((coords >= fbox[0] - tol) & (coords <= fbox[1] + tol), axis=1)
    inside_open = np.all((coords > fbox[0] + tol) & (coords < fbox[1] - tol), axis=1)
    cls[inside_closed] = NodeClass.INTERFACE
    cls[inside_open] = NodeClass.COVERED_BY_FEM
    cls[grid0.boundary_count > 0] = NodeClass.OUTER_BOUNDARY
    grid = StructuredGrid(origin, tuple(shape), float(h), cls)

    gidx = grid.index_of_points(fem.nodes)
    bnd = fem.boundary_nodes
    if np.any(gidx[bnd] < 0):
        raise MeshError(
            f"{int(np.sum(gidx[bnd] < 0))} FE boundary nodes are not FD nodes; "
            "refinement split an interface edge"
        )
    fem_to_fd = np.stack([bnd, gidx[bnd]], axis=1)
    covered = np.flatnonzero(cls == NodeClass.COVERED_BY_FEM)
    lookup = {int(g): k for k, g in enumerate(gidx) if g >= 0}
    try:
        fd_to_fem = np.array([[c, lookup[int(c)]] for c in covered], dtype=np.int64).reshape(-1, 2)
    except KeyError as exc:
        raise MeshError(f"covered FD node {exc} missing from the FE mesh") from None
    if np.any(fem.is_boundary_node[fd_to_fem[:, 1]]):
        raise MeshError("covered FD node maps onto the FE boundary")
    mesh = HybridMesh(grid, fem, OverlapMap(fem_to_fd, fd_to_fem), np.asarray(dom), np.asarray(fbox))
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


class _Refiner:
    def __init__(self, mesh: SimplicialMesh):
        self.dim = mesh.dim
        self.nodes = [tuple(p) for p in mesh.nodes]
        self.elements: dict[int, tuple[int, ...]] = {
            k: tuple(int(v) for v in e) for k, e in enumerate(mesh.elements)
        }
        self.gen = {k: int(g) for k, g in enumerate(mesh.generation)}
        self.root = {k: k for k in self.elements}
        self.next_id = len(self.elements)
        self.midpoint: dict[tuple[int, int], int] = {}
        self.edge_elems: dict[tuple[int, int], set[int]] = {}
        for k, e in self.elements.items():
            self._register(k, e)

    def _edges(self, e):
        return [(min(a, b), max(a, b)) for a, b in itertools.combinations(e, 2)]

    def _register(self, k, e):
        for ed in self._edges(e):
            self.edge_elems.setdefault(ed, set()).add(k)

    def _unregister(self, k, e):
        for ed in self._edges(e):
            s = self.edge_elems[ed]
            s.discard(k)
            if not s:
                del self.edge_elems[ed]

    def _key(self, ed):
        a, b = ed
        pa, pb = np.array(self.nodes[a]), np.array(self.nodes[b])
        length = float(np.linalg.norm(pa - pb))
        # strict total order: length, then lexicographic midpoint, then indices
        mid = tuple(np.round((pa + pb) / 2, 12))
        return (round(length, 12), mid, ed)

    def longest_edge(self, k):
        return max(self._edges(self.elements[k]), key=self._key)

    def bisect_edge(self, ed):
        a, b = ed
        m = self.midpoint.get(ed)
        if m is None:
            m = len(self.nodes)
            self.nodes.append(tuple((np.array(self.nodes[a]) + np.array(self.nodes[b])) / 2))
            self.midpoint[ed] = m
        for k in list(self.edge_elems.get(ed, ())):
            e = self.elements.pop(k)
            self._unregister(k, e)
            g, r = self.gen.pop(k), self.root.pop(k)
            for old in (a, b):
                child = tuple(m if v == old else v for v in e)
                cid = self.next_id
                self.next_id += 1
                self.elements[cid] = child
                self.gen[cid] = g + 1
                self.root[cid] = r
                self._register(cid, child)

    def refine(self, k):
        """Longest-edge-propagation-path bisection of element k."""
        stack = [k]
        while stack:
            cur = stack[-1]
            if cur not in self.elements:
                stack.pop()
                continue
            ed = self.longest_edge(cur)
            blockers = [
                n for n in self.edge_elems[ed] if n != cur and self.longest_edge(n) != ed
            ]
            if blockers:
                stack.append(blockers[0])
                continue
            self.bisect_edge(ed)
            stack.pop()

    def to_mesh(self) -> SimplicialMesh:
        ids = sorted(self.elements)
        nodes = np.array(self.nodes, dtype=float)
        elements = np.array([self.elements[k] for k in ids], dtype=np.int64)
        gen = np.array([self.gen[k] for k in ids], dtype=np.int64)
        return SimplicialMesh(nodes, _orient(nodes, elements), gen)


def refine_elements(mesh: SimplicialMesh, marked, angle_floor: float = 20.0) -> SimplicialMesh:
    """Refine the ``marked`` elements and close the mesh conformingly.

    Each marked element is bisected twice (its children are bisected once
    more), neighbours are split only as far as longest-edge propagation
    demands.  Existing nodes keep their indices; new nodes are appended.
    Raises :class:`MeshError` if the result breaks the angle floor.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise MeshError("marked element index out of range")
    r = _Refiner(mesh)
    target = {int(k): int(mesh.generation[k]) + 2 for k in marked}
    for k in marked:
        r.refine(int(k))
    while True:
        todo = [c for c, root in r.root.items() if root in target and r.gen[c] < target[root]]
        if not todo:
            break
        for c in todo:
            if c in r.elements:
                r.refine(c)
    out = r.to_mesh()
    if out.min_angle() < angle_floor - 1e-9:
        raise MeshError(
            f"refinement produced minimum angle {out.min_angle():.2f} deg below floor {angle_floor}"
        )
    return out


def mesh_h(mesh: SimplicialMesh) -> np.ndarray:
    """Element diameter (longest edge length), one value per element."""
    p = mesh.nodes[mesh.elements]
    lengths = [
        np.linalg.norm(p[:, a] - p[:, b], axis=1)
        for a, b in itertools.combinations(range(mesh.dim + 1), 2)
    ]
    return np.max(lengths, axis=0)


# ---------------------------------------------------------------------------
# field transfer
# ---------------------------------------------------------------------------


def _barycentric(mesh: SimplicialMesh, elems: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = mesh.nodes[mesh.elements[elems]]  # (k, d+1, d)
    d = mesh.dim
    t = np.stack([p[:, j + 1] - p[:, 0] for j in range(d)], axis=2)
    lam = np.linalg.solve(t, (pts - p[:, 0])[..., None])[..., 0]
    return np.concatenate([1 - lam.sum(axis=1, keepdims=True), lam], axis=1)


def locate_points(mesh: SimplicialMesh, pts: np.ndarray, k: int = 16):
    """Containing element and barycentric coordinates of each point.

    Points outside the mesh are clamped onto the nearest candidate element
    (barycentrics clipped and renormalised); ``outside`` flags them.
    """
    pts = np.atleast_2d(np.asarray(pts, float))
    cent = mesh.nodes[mesh.elements].mean(axis=1)
    tree = cKDTree(cent)
    k = min(k, mesh.n_elements)
    _, cand = tree.query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    best_el = np.empty(len(pts), dtype=np.int64)
    best_bc = np.empty((len(pts), mesh.dim + 1))
    best_score = np.full(len(pts), -np.inf)
    for j in range(k):
        bc = _barycentric(mesh, cand[:, j], pts)
        score = bc.min(axis=1)
        better = score > best_score + 1e-14
        best_score[better] = score[better]
        best_el[better] = cand[better, j]
        best_bc[better] = bc[better]
    outside = best_score < -1e-10
    if outside.any():
        bc = np.clip(best_bc[outside], 0, None)
        best_bc[outside] = bc / bc.sum(axis=1, keepdims=True)
    return best_el, best_bc, outside


def transfer_field(values, source: SimplicialMesh, target: SimplicialMesh) -> np.ndarray:
    """Piecewise-linear interpolation of nodal ``values`` onto ``target`` nodes.

    Values at target nodes that coincide with source nodes are copied exactly.
    Trailing dimensions of ``values`` (e.g. vector components) are carried.
    """
    values = np.asarray(values, float)
    el, bc, outside = locate_points(source, target.nodes)
    if outside.any():
        logger.warning("%d target nodes outside the source mesh; clamped", int(outside.sum()))
    out = np.einsum("nk,nk...->n...", bc, values[source.elements[el]])
    dist, idx = cKDTree(source.nodes).query(target.nodes)
    scale = float(np.max(np.ptp(source.nodes, axis=0)))
    same = dist <= 1e-12 * max(scale, 1.0)
    out[same] = values[idx[same]]
    return out
