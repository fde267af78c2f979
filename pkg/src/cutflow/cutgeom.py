"""Cut-cell geometry from the piecewise linear level set.

At each discrete time the P1 level set classifies every fine element as
inside fluid 1, inside fluid 2, or cut.  Cut elements get an interface
segment (the zero set is planar per element), a two-part sub-triangulation
with mapped quadrature rules, and the local cut measures used by the
interface penalty parameters.  A space-time slab bundles the geometry at its
collocation times and derives the active meshes and stabilized face sets.
"""

from __future__ import annotations

import numpy as np

from .quadrature import triangle_rule

# phase index 0 <-> level set < 0, phase index 1 <-> level set > 0 (enclosed)
LABEL_NEG, LABEL_CUT, LABEL_POS = -1, 0, 1


class GeometryError(RuntimeError):
    pass


def _perturbed_vertex_values(phi1):
    """Vertex values with exact zeros nudged to +1e-14*h (deterministic)."""
    vals = phi1.vertex_values.copy()
    tiny = 1e-14 * phi1.mesh.h
    vals[np.abs(vals) < tiny] = tiny
    return vals


def classify_elements(phi1):
    """Per fine element: -1 all-negative, +1 all-positive, 0 cut."""
    if phi1.q != 1:
        raise ValueError("classification runs on the P1 level set")
    vals = _perturbed_vertex_values(phi1)
    tv = vals[phi1.mesh.triangles]  # (nt, 3)
    pos = tv > 0.0
    npos = pos.sum(axis=1)
    labels = np.zeros(len(tv), dtype=np.int64)
    labels[npos == 3] = LABEL_POS
    labels[npos == 0] = LABEL_NEG
    return labels


def coarsen_labels(labels_fine, parent_map, nt_coarse):
    """Coarse element labels induced by the 4 children: pure only if all agree."""
    out = np.zeros(nt_coarse, dtype=np.int64)
    mn = np.full(nt_coarse, 2, dtype=np.int64)
    mx = np.full(nt_coarse, -2, dtype=np.int64)
    np.minimum.at(mn, parent_map, labels_fine)
    np.maximum.at(mx, parent_map, labels_fine)
    pure = mn == mx
    out[pure] = mn[pure]
    out[~pure] = LABEL_CUT
    return out


class InterfaceMesh:
    """Planar interface segments per cut fine element.

    endpoints : (E, 2, 2); normals : (E, 2) unit, pointing toward positive
    level set; owner / coarse_owner : (E,) element indices.
    """

    def __init__(self, owner, coarse_owner, endpoints, normals, lengths):
        self.owner = owner
        self.coarse_owner = coarse_owner
        self.endpoints = endpoints
        self.normals = normals
        self.lengths = lengths

    @property
    def num_segments(self):
        return len(self.owner)

    def total_length(self):
        return float(self.lengths.sum())

    def midpoints(self):
        return self.endpoints.mean(axis=1)

    def gauss_points(self, npts=2):
        """Physical quadrature points and weights on every segment."""
        from .quadrature import segment_rule
        x, w = segment_rule(npts)
        p0 = self.endpoints[:, 0][:, None, :]
        p1 = self.endpoints[:, 1][:, None, :]
        pts = p0 + x[None, :, None] * (p1 - p0)
        wts = self.lengths[:, None] * w[None, :]
        return pts, wts


def _cut_topology(phi1, labels=None):
    """Lone vertex, crossing points and phase of the lone side per cut element."""
    mesh = phi1.mesh
    vals = _perturbed_vertex_values(phi1)
    if labels is None:
        labels = classify_elements(phi1)
    cut = np.where(labels == LABEL_CUT)[0]
    tv = vals[mesh.triangles[cut]]
    pos = tv > 0.0
    npos = pos.sum(axis=1)
    lone = np.where((npos == 1)[:, None], np.argmax(pos, axis=1)[:, None],
                    np.argmax(~pos, axis=1)[:, None])[:, 0]
    lone_phase = (npos == 1).astype(np.int64)  # 1 if the lone vertex is positive
    rows = np.arange(len(cut))
    a = (lone + 1) % 3
    b = (lone + 2) % 3
    corners = mesh.vertices[mesh.triangles[cut]]
    pl = corners[rows, lone]
    pa = corners[rows, a]
    pb = corners[rows, b]
    vl = tv[rows, lone]
    ta = vl / (vl - tv[rows, a])
    tb = vl / (vl - tv[rows, b])
    xa = pl + ta[:, None] * (pa - pl)
    xb = pl + tb[:, None] * (pb - pl)
    return cut, lone, lone_phase, pl, pa, pb, xa, xb


def reconstruct_interface(phi1, labels=None):
    """Zero set of the P1 level set as one segment per cut fine element."""
    mesh = phi1.mesh
    cut, lone, lone_phase, pl, pa, pb, xa, xb = _cut_topology(phi1, labels)
    if len(cut) == 0:
        z2 = np.zeros((0, 2))
        return InterfaceMesh(cut, cut, np.zeros((0, 2, 2)), z2, np.zeros(0))

    vals = _perturbed_vertex_values(phi1)
    grads = np.einsum("nk,nkd->nd", vals[mesh.triangles[cut]], mesh.grads[cut])
    nrm = np.linalg.norm(grads, axis=1)
    normals = grads / nrm[:, None]

    # orient endpoints so that rotating the tangent by -90 deg gives the normal
    endpoints = np.stack([xa, xb], axis=1)
    tang = xb - xa
    flip = tang[:, 1] * normals[:, 0] - tang[:, 0] * normals[:, 1] < 0.0
    endpoints[flip] = endpoints[flip][:, ::-1]
    lengths = np.linalg.norm(tang, axis=1)

    # reject segments that leave the domain through the open part of a
    # boundary face (grazing a boundary vertex is tolerated; the flow-level
    # guard in SlabGeometry is stricter)
    x0, x1, y0, y1 = mesh.domain
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    ep = endpoints.reshape(-1, 2)
    on_boundary = (np.abs(ep[:, 0] - x0) < tol) | (np.abs(ep[:, 0] - x1) < tol) | \
                  (np.abs(ep[:, 1] - y0) < tol) | (np.abs(ep[:, 1] - y1) < tol)
    if np.any(on_boundary):
        bad = ep[on_boundary]
        owners = np.repeat(cut, 2)[on_boundary]
        verts = mesh.vertices[mesh.triangles[owners]]  # (m, 3, 2)
        dist = np.linalg.norm(verts - bad[:, None, :], axis=2).min(axis=1)
        if np.any(dist > 1e-9 * mesh.h):
            raise GeometryError("interface crosses the domain boundary")

    coarse_owner = mesh.parent_map[cut] if mesh.parent_map is not None else cut.copy()
    return InterfaceMesh(cut, coarse_owner, endpoints, normals, lengths)


class CutQuadrature:
    """Two-part sub-triangulation and quadrature of every cut fine element.

    sub_owner[i], sub_corners[i]: sub-triangles of K intersect Omega_i per
    phase i, flattened over cut elements.  areas_cut[c, i] is the area of
    the phase-i part of cut element c; alpha and gamma are the cut measures
    scaled by the element diameter.
    """

    def __init__(self, phi1, order=2, labels=None):
        mesh = phi1.mesh
        self.order = order
        cut, lone, lone_phase, pl, pa, pb, xa, xb = _cut_topology(phi1, labels)
        self.cut_elems = cut
        ncut = len(cut)
        self.h_K = mesh.tri_diams[cut]

        lone_tris = np.stack([pl, xa, xb], axis=1)  # (C,3,2)
        quad_tris1 = np.stack([pa, pb, xb], axis=1)
        quad_tris2 = np.stack([pa, xb, xa], axis=1)

        self.sub_owner = [None, None]
        self.sub_corners = [None, None]
        self.areas_cut = np.zeros((ncut, 2))
        for phase in (0, 1):
            is_lone = lone_phase == phase
            own = np.concatenate([cut[is_lone], cut[~is_lone], cut[~is_lone]])
            crn = np.concatenate([lone_tris[is_lone], quad_tris1[~is_lone],
                                  quad_tris2[~is_lone]])
            self.sub_owner[phase] = own
            self.sub_corners[phase] = crn
            ar = _tri_areas(crn)
            idx = np.concatenate([np.where(is_lone)[0], np.where(~is_lone)[0],
                                  np.where(~is_lone)[0]])
            np.add.at(self.areas_cut[:, phase], idx, ar)

        seg_len = np.linalg.norm(xb - xa, axis=1)
        self.alpha = self.areas_cut / self.h_K[:, None] ** 2
        self.gamma = seg_len / self.h_K

        bary, w = triangle_rule(order)
        self.ref_bary = bary
        self.ref_weights = w

    def points_weights(self, phase):
        """Physical quadrature points (S, q, 2) and weights (S, q) of a phase."""
        crn = self.sub_corners[phase]
        ar = _tri_areas(crn)
        pts = np.einsum("qk,nkd->nqd", self.ref_bary, crn)
        wts = ar[:, None] * self.ref_weights[None, :]
        return pts, wts


def _tri_areas(corners):
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def cut_quadrature(phi1, order=2):
    return CutQuadrature(phi1, order)


class GeomAtTime:
    """All cut geometry derived from one level-set snapshot."""

    def __init__(self, phi1, phiq=None, order=2):
        self.time = phi1.time
        self.phi1 = phi1
        self.phiq = phiq
        mesh = phi1.mesh
        self.fine = mesh
        self.labels_fine = classify_elements(phi1)
        self.iface = reconstruct_interface(phi1, self.labels_fine)
        self.cutq = CutQuadrature(phi1, order, self.labels_fine)
        self.pure_fine = [np.where(self.labels_fine == LABEL_NEG)[0],
                          np.where(self.labels_fine == LABEL_POS)[0]]
        self.curvature = None  # filled by the time loop when surface tension is on

    def attach_coarse(self, coarse_mesh):
        self.coarse = coarse_mesh
        self.labels_coarse = coarsen_labels(self.labels_fine, self.fine.parent_map,
                                            coarse_mesh.num_triangles)
        self.pure_coarse = [np.where(self.labels_coarse == LABEL_NEG)[0],
                            np.where(self.labels_coarse == LABEL_POS)[0]]
        return self

    def phase_area(self, phase):
        a = self.fine.areas[self.labels_fine == (LABEL_POS if phase else LABEL_NEG)].sum()
        return a + self.cutq.areas_cut[:, phase].sum()


class SlabGeometry:
    """Per-slab geometry: snapshots at the collocation times plus the active
    meshes and ghost-face sets shared by the whole slab."""

    def __init__(self, geoms, fine_mesh, coarse_mesh):
        times = [g.time for g in geoms]
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise ValueError("slab time points must be strictly increasing")
        for g in geoms:
            if g.fine is not fine_mesh:
                raise ValueError("slab snapshots must share the fine mesh")
            if not hasattr(g, "labels_coarse"):
                g.attach_coarse(coarse_mesh)
        self.geoms = geoms
        self.times = times
        self.fine = fine_mesh
        self.coarse = coarse_mesh
        has_bdry = np.zeros(fine_mesh.num_triangles, dtype=bool)
        has_bdry[fine_mesh.face_tris[fine_mesh.boundary_faces, 0]] = True
        for g in geoms:
            if np.any(has_bdry & (g.labels_fine == LABEL_CUT)):
                raise GeometryError(
                    f"interface touches the domain boundary at t={g.time}")
        self.active_fine, self.cut_any_fine = _active_sets(
            np.stack([g.labels_fine for g in geoms]))
        self.active_coarse, self.cut_any_coarse = _active_sets(
            np.stack([g.labels_coarse for g in geoms]))
        self.ghost_faces_fine = [_ghost_faces(fine_mesh, self.cut_any_fine,
                                              self.active_fine[i]) for i in (0, 1)]
        self.ghost_faces_coarse = [_ghost_faces(coarse_mesh, self.cut_any_coarse,
                                                self.active_coarse[i]) for i in (0, 1)]
        self.active_nodes_fine = [_active_nodes(fine_mesh, self.active_fine[i])
                                  for i in (0, 1)]
        self.active_nodes_coarse = [_active_nodes(coarse_mesh, self.active_coarse[i])
                                    for i in (0, 1)]

    @property
    def t_start(self):
        return self.times[0]

    @property
    def t_end(self):
        return self.times[-1]

    def geom_at(self, t):
        for g in self.geoms:
            if abs(g.time - t) <= 1e-12 * max(1.0, abs(t)):
                return g
        raise KeyError(f"no geometry snapshot at t={t}")


def _active_sets(labels):
    """labels: (ntime, nt).  Returns ([active_0, active_1], cut_any) masks.

    An element is treated as cut over the slab if it is cut at some time or
    changes side between two times; active meshes collect every element that
    meets a fluid at any collocation time.
    """
    has_neg = (labels == LABEL_NEG).any(axis=0)
    has_pos = (labels == LABEL_POS).any(axis=0)
    has_cut = (labels == LABEL_CUT).any(axis=0)
    cut_any = has_cut | (has_neg & has_pos)
    return [has_neg | cut_any, has_pos | cut_any], cut_any


def _ghost_faces(mesh, cut_any, active):
    """Interior faces of cut-over-the-slab elements with both neighbors active."""
    ft = mesh.face_tris
    interior = ft[:, 1] >= 0
    touches_cut = np.zeros(len(ft), dtype=bool)
    touches_cut[interior] = cut_any[ft[interior, 0]] | cut_any[ft[interior, 1]]
    both_active = np.zeros(len(ft), dtype=bool)
    both_active[interior] = active[ft[interior, 0]] & active[ft[interior, 1]]
    return np.where(touches_cut & both_active)[0]


def _active_nodes(mesh, active):
    return np.unique(mesh.triangles[active].reshape(-1))


def build_slab_geometry(phis, fine_mesh, coarse_mesh, order=2, phiqs=None):
    """Geometry bundle for one slab from P1 level sets at its collocation times."""
    geoms = []
    for k, p in enumerate(phis):
        pq = phiqs[k] if phiqs is not None else None
        geoms.append(GeomAtTime(p, pq, order).attach_coarse(coarse_mesh))
    return SlabGeometry(geoms, fine_mesh, coarse_mesh)
