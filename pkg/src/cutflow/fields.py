"""Piecewise velocity fields on the fine mesh.

The flow solver produces one vector field per fluid, each a P1 function on
that fluid's active mesh.  Away from its own subdomain a field is still
defined on the overlap band (the natural finite element extension), which is
what the level-set transport and the convection linearization sample.
"""

from __future__ import annotations

import numpy as np

from .elements import p1_basis


class PhaseVelocity:
    """Pair of nodal P1 vector fields with per-element validity masks.

    values : (2, nv, 2) nodal vectors per phase
    valid  : (2, nt) bool, True where the phase's field is defined
    """

    def __init__(self, mesh, values, valid):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        self.valid = np.asarray(valid, dtype=bool)

    @classmethod
    def from_callable(cls, mesh, fn):
        """Interpolate an analytic velocity at the vertices, valid everywhere."""
        vals = np.asarray(fn(mesh.vertices), dtype=float)
        if vals.shape != (mesh.num_vertices, 2):
            raise ValueError("velocity callback must return (n, 2) values")
        values = np.stack([vals, vals])
        valid = np.ones((2, mesh.num_triangles), dtype=bool)
        return cls(mesh, values, valid)

    @classmethod
    def zero(cls, mesh):
        return cls(mesh, np.zeros((2, mesh.num_vertices, 2)),
                   np.ones((2, mesh.num_triangles), dtype=bool))

    def sample(self, tri_ids, bary, phi_at_points):
        """Evaluate at points given by (triangle, barycentric) pairs.

        The phase is selected by the sign of the level set at each point
        (phase 1 where phi > 0); where that phase's field is not defined on
        the element the other phase is used, which is consistent since the
        velocity is continuous across the interface.
        """
        tri_ids = np.asarray(tri_ids)
        shape = p1_basis(bary)  # (n, 3)
        nodes = self.mesh.triangles[tri_ids]  # (n, 3)
        phase = (np.asarray(phi_at_points) > 0.0).astype(np.int64)
        ok = self.valid[phase, tri_ids]
        phase = np.where(ok, phase, 1 - phase)
        nodal = self.values[phase[:, None], nodes]  # (n, 3, 2)
        return np.einsum("nk,nkd->nd", shape, nodal)

    def sample_phase(self, phase, tri_ids, bary):
        """Evaluate one phase's field, falling back to the other where the
        element left that phase's active mesh (new-growth region)."""
        tri_ids = np.asarray(tri_ids)
        shape = p1_basis(bary)
        nodes = self.mesh.triangles[tri_ids]
        ph = np.full(len(tri_ids), phase, dtype=np.int64)
        ok = self.valid[ph, tri_ids]
        ph = np.where(ok, ph, 1 - ph)
        nodal = self.values[ph[:, None], nodes]
        return np.einsum("nk,nkd->nd", shape, nodal)

    def phase_values(self, i):
        return self.values[i]
