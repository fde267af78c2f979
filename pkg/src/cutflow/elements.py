"""Lagrange element tables on the background meshes.

P1 lives on mesh vertices.  P2 adds one node per face (edge midpoint); the
local node order is [v0, v1, v2, m0, m1, m2] with m_k the midpoint of the
edge opposite vertex k.
"""

from __future__ import annotations

import numpy as np


def p2_node_count(mesh):
    return mesh.num_vertices + mesh.num_faces


def p2_node_coords(mesh):
    mid = 0.5 * (mesh.vertices[mesh.faces[:, 0]] + mesh.vertices[mesh.faces[:, 1]])
    return np.vstack([mesh.vertices, mid])


def p2_element_nodes(mesh):
    """(nt, 6) global P2 node indices per triangle."""
    return np.hstack([mesh.triangles, mesh.num_vertices + mesh.tri_faces])


def p1_basis(bary):
    """P1 shape values at barycentric points (q, 3) -> (q, 3)."""
    return np.asarray(bary, dtype=float)


def p2_basis(bary):
    """P2 shape values at barycentric points (q, 3) -> (q, 6)."""
    lam = np.asarray(bary, dtype=float)
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    out = np.empty((lam.shape[0], 6))
    out[:, 0] = l0 * (2 * l0 - 1)
    out[:, 1] = l1 * (2 * l1 - 1)
    out[:, 2] = l2 * (2 * l2 - 1)
    out[:, 3] = 4 * l1 * l2
    out[:, 4] = 4 * l2 * l0
    out[:, 5] = 4 * l0 * l1
    return out


def p2_grad(bary, grads):
    """P2 shape gradients.

    bary: (q, 3) points; grads: (n, 3, 2) barycentric gradients per element.
    Returns (n, q, 6, 2).
    """
    lam = np.asarray(bary, dtype=float)
    g = np.asarray(grads, dtype=float)
    n, q = g.shape[0], lam.shape[0]
    out = np.empty((n, q, 6, 2))
    for k in range(3):
        out[:, :, k] = (4 * lam[None, :, k, None] - 1) * g[:, None, k]
    # m_k = 4 * lam_i * lam_j for (i, j) the edge opposite k
    for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        out[:, :, 3 + k] = 4 * (lam[None, :, i, None] * g[:, None, j]
                                + lam[None, :, j, None] * g[:, None, i])
    return out


def p2_hessian(grads):
    """Constant P2 shape Hessians per element: (n, 6, 2, 2)."""
    g = np.asarray(grads, dtype=float)
    n = g.shape[0]
    out = np.empty((n, 6, 2, 2))
    for k in range(3):
        out[:, k] = 4 * g[:, k, :, None] * g[:, k, None, :]
    for k, (i, j) in enumerate(((1, 2), (2, 0), (0, 1))):
        out[:, 3 + k] = 4 * (g[:, i, :, None] * g[:, j, None, :]
                             + g[:, j, :, None] * g[:, i, None, :])
    return out
