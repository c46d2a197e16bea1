"""P1 element kernels for vector fields on simplicial meshes.

Vector fields are stored node-major: an (n, d) array raveled so that the dof
of node ``i`` and component ``c`` is ``i * d + c``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .grid_mesh import SimplicialMesh


def p1_gradients(mesh: SimplicialMesh) -> np.ndarray:
    """Gradients of the barycentric basis functions, shape (m, d+1, d)."""
    p = mesh.nodes[mesh.elements]
    d = mesh.dim
    jac = np.stack([p[:, k + 1] - p[:, 0] for k in range(d)], axis=1)  # rows = edges
    inv = np.linalg.inv(jac)  # columns = grads of lambda_1..lambda_d
    g = np.transpose(inv, (0, 2, 1))
    g0 = -g.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g], axis=1)


def scalar_stiffness(mesh: SimplicialMesh, grads: np.ndarray | None = None) -> sp.csr_matrix:
    """(grad u, grad v) for scalar P1 functions."""
    g = p1_gradients(mesh) if grads is None else grads
    loc = mesh.volumes[:, None, None] * np.einsum("mid,mjd->mij", g, g)
    el = mesh.elements
    k = el.shape[1]
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(n, n))


def element_divergence(grads: np.ndarray, elements: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Piecewise-constant divergence of a nodal vector field.

    ``field`` is (..., n, d); the result is (..., m).
    """
    vals = field[..., elements, :]  # (..., m, d+1, d)
    return np.einsum("mkd,...mkd->...m", grads, vals)


def element_mean(values: np.ndarray, elements: np.ndarray) -> np.ndarray:
    return values[elements].mean(axis=1)


def divdiv_matrix(mesh: SimplicialMesh, eps: np.ndarray, grads: np.ndarray | None = None) -> sp.csr_matrix:
    """Matrix of ((eps - 1) div E, div v) with eps taken as its element mean.

    Symmetric and positive semi-definite for eps >= 1.  It drops the
    grad(eps) . E part of div((eps - 1) E), which would make the operator
    non-symmetric and the explicit scheme lose its conserved energy.
    """
    g = p1_gradients(mesh) if grads is None else grads
    el = mesh.elements
    m, k, d = g.shape
    a = (element_mean(eps, el) - 1.0) * mesh.volumes
    b = g.reshape(m, k * d)  # node-major div row of each element
    loc = a[:, None, None] * b[:, :, None] * b[:, None, :]
    dof = (el[:, :, None] * d + np.arange(d)[None, None, :]).reshape(m, k * d)
    rows = np.repeat(dof, k * d, axis=1).ravel()
    cols = np.tile(dof, (1, k * d)).ravel()
    n = mesh.n_nodes * d
    return sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(n, n))


def weighted_lumped_mass(mesh: SimplicialMesh, nodal: np.ndarray) -> np.ndarray:
    """Row-sum lumped mass with the element mean of ``nodal`` as weight."""
    w = element_mean(nodal, mesh.elements) * mesh.volumes / (mesh.dim + 1)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements.ravel(), np.repeat(w, mesh.dim + 1))
    return out


def element_to_node_average(mesh: SimplicialMesh, elem_density: np.ndarray) -> np.ndarray:
    """Sum over incident elements of |K|/(d+1) * value, the adjoint of weighted_lumped_mass."""
    w = elem_density * mesh.volumes / (mesh.dim + 1)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.elements.ravel(), np.repeat(w, mesh.dim + 1))
    return out
