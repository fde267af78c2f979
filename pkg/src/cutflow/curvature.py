"""Stabilized discrete mean-curvature vector on the implicit interface.

The interface is carried as the zero set of a piecewise polynomial level set
of degree q.  All integrals are evaluated on its piecewise linear zero set
and transported onto the degree-q zero set by a small mesh deformation that
moves points along the level-set gradient (zero at mesh vertices, computed
by a 1D Newton search at the higher-order lattice nodes).  The curvature
vector solves a mass problem against the tangential gradient of the
coordinate map, stabilized by face jumps and normal derivatives so the
system stays well conditioned however the interface cuts the mesh.

Sign convention: the computed vector points toward the local center of
curvature (for a circular bubble: toward the bubble center), so that the
surface tension load sigma * (H, <v>) produces the physical pressure jump
sigma * kappa inside the enclosed fluid.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cutgeom import LABEL_CUT, classify_elements, reconstruct_interface
from .elements import p1_basis, p2_basis, p2_element_nodes, p2_hessian, p2_node_coords
from .levelset import p2_grad_single
from .quadrature import segment_rule


class CurvatureError(RuntimeError):
    pass


class MeshMap:
    """Deformation mapping the planar interface onto the degree-q zero set.

    Vertices never move (the P1 and P_q level sets agree there); midpoint
    lattice nodes move along the local level-set gradient.  Quadrature
    points are projected exactly by the same Newton search, the Jacobian
    comes from the interpolated displacement field.
    """

    def __init__(self, phi1, phiq, active_elems, disp, newton_tol=1e-13,
                 newton_maxit=20):
        self.phi1 = phi1
        self.phiq = phiq
        self.active_elems = active_elems
        self.disp = disp  # (n_lattice, 2) dense over the q-lattice, zero off band
        self.newton_tol = newton_tol
        self.newton_maxit = newton_maxit
        self.mesh = phi1.mesh

    @property
    def identity(self):
        return self.phiq.q == 1

    def displacement_at(self, tri_ids, bary):
        if self.identity:
            return np.zeros((len(tri_ids), 2))
        enodes = p2_element_nodes(self.mesh)[tri_ids]
        return np.einsum("nk,nkd->nd", p2_basis(bary), self.disp[enodes])

    def jacobian(self, tri_ids, bary):
        """D theta = I + grad(displacement) per point, (n, 2, 2)."""
        n = len(tri_ids)
        out = np.zeros((n, 2, 2))
        out[:, 0, 0] = out[:, 1, 1] = 1.0
        if self.identity:
            return out
        enodes = p2_element_nodes(self.mesh)[tri_ids]
        gb = p2_grad_single(bary, self.mesh.grads[tri_ids])  # (n, 6, 2)
        out += np.einsum("nkd,nke->nde", self.disp[enodes], gb)
        return out

    def map_points(self, tri_ids, points, bary, weights=None):
        """Project points in cut elements onto the degree-q zero set.

        Moves along the element-local gradient of the degree-q level set so
        that phi_q at the image equals phi_1 at the source.  Along a fixed
        line the quadratic level set restricts to a 1D quadratic, solved in
        closed form and polished by one Newton step.  Points with no root on
        their line (possible on degenerate slivers where the P1 and P_q sign
        patterns disagree) are clamped to the nearest approach; if such
        points carry more than a sliver of the interface measure the
        interface is under-resolved and an error is raised.
        """
        if self.identity:
            return points.copy()
        mesh = self.mesh
        tri_ids = np.asarray(tri_ids)
        target = self.phi1.eval_in_elements(tri_ids, bary)
        enodes = p2_element_nodes(mesh)[tri_ids]
        coeff = self.phiq.coeffs[enodes]
        g = mesh.grads[tri_ids]
        G = np.einsum("nk,nkd->nd", coeff, p2_grad_single(np.asarray(bary, float), g))
        hess = p2_hessian(g)
        H = np.einsum("nk,nkde->nde", coeff, hess)
        d, no_root = _line_root(
            a=0.5 * np.einsum("nd,nde,ne->n", G, H, G),
            b=np.einsum("nd,nd->n", G, G),
            c=self.phiq.eval_in_elements(tri_ids, bary) - target,
            clamp=0.3 * mesh.tri_diams[tri_ids] / np.maximum(
                np.linalg.norm(G, axis=1), 1e-300))
        if np.any(no_root):
            if weights is not None:
                bad_measure = weights[no_root].sum()
                if bad_measure > 1e-3 * max(weights.sum(), 1e-300):
                    raise CurvatureError(
                        f"point projection failed on {no_root.sum()} points "
                        f"(element {tri_ids[no_root][0]}); interface under-resolved")
            elif no_root.sum() > max(1, 0.02 * len(points)):
                raise CurvatureError(
                    f"point projection failed on {no_root.sum()} points "
                    f"(element {tri_ids[no_root][0]}); interface under-resolved")
        return points + d[:, None] * G


def _line_root(a, b, c, clamp):
    """Smallest-magnitude real root of a d^2 + b d + c = 0, elementwise.

    Returns (d, no_root); where the discriminant is negative the nearest
    approach -b/(2a) is used instead, and everything is clamped to +-clamp.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    d = np.zeros_like(b)
    scale = np.abs(b) + np.sqrt(np.abs(a * c)) + 1e-300
    linear = np.abs(a) <= 1e-14 * scale
    safe_b = np.where(np.abs(b) > 1e-300, b, 1e-300)
    d[linear] = (-c / safe_b)[linear]
    quad = ~linear
    disc = b * b - 4.0 * a * c
    no_root = quad & (disc < 0.0)
    ok = quad & ~no_root
    sq = np.sqrt(np.maximum(disc, 0.0))
    qq = -0.5 * (b + np.where(b >= 0, sq, -sq))
    safe_a = np.where(np.abs(a) > 1e-300, a, 1e-300)
    safe_q = np.where(np.abs(qq) > 1e-300, qq, 1e-300)
    r1 = qq / safe_a
    r2 = c / safe_q
    d[ok] = np.where(np.abs(r1) <= np.abs(r2), r1, r2)[ok]
    d[no_root] = (-0.5 * b / safe_a)[no_root]
    d = np.clip(d, -clamp, clamp)
    return d, no_root


def build_theta_map(phi1, phiq, newton_tol=1e-13, newton_maxit=20):
    """Displacement field moving the q-degree lattice onto the implicit
    interface geometry; identity for q = 1."""
    mesh = phi1.mesh
    if phi1.q != 1:
        raise ValueError("first argument must be the P1 level set")
    labels = classify_elements(phi1)
    active = np.where(labels == LABEL_CUT)[0]
    if phiq.q == 1:
        return MeshMap(phi1, phiq, active, None, newton_tol, newton_maxit)

    enodes = p2_element_nodes(mesh)[active]
    lattice = p2_node_coords(mesh)
    # only the midpoint lattice nodes move; each cut element contributes a
    # candidate displacement for its three midpoints, averaged where shared
    node_bary = np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    ndisp = np.zeros((len(lattice), 2))
    wsum = np.zeros(len(lattice))
    g = mesh.grads[active]
    coeff = phiq.coeffs[enodes]
    hess = np.einsum("nk,nkde->nde", coeff, p2_hessian(g))
    v1 = phi1.coeffs[mesh.triangles[active]]
    failures = 0
    for loc in range(3):
        bary = np.tile(node_bary[loc], (len(active), 1))
        target = np.einsum("k,nk->n", node_bary[loc], v1)
        G = np.einsum("nk,nkd->nd", coeff, p2_grad_single(bary, g))
        val0 = np.einsum("qk,nk->n", p2_basis(node_bary[loc][None]), coeff)
        d, no_root = _line_root(
            a=0.5 * np.einsum("nd,nde,ne->n", G, hess, G),
            b=np.einsum("nd,nd->n", G, G),
            c=val0 - target,
            clamp=0.3 * mesh.tri_diams[active] / np.maximum(
                np.linalg.norm(G, axis=1), 1e-300))
        failures += int(no_root.sum())
        ids = enodes[:, 3 + loc]
        np.add.at(ndisp, ids, d[:, None] * G)
        np.add.at(wsum, ids, 1.0)
    if failures > max(2, 0.05 * 3 * len(active)):
        raise CurvatureError(
            f"mesh deformation failed at {failures} lattice points of "
            f"{3 * len(active)}; the interface is under-resolved")
    nz = wsum > 0
    ndisp[nz] /= wsum[nz, None]
    return MeshMap(phi1, phiq, active, ndisp, newton_tol, newton_maxit)


class CurvatureField:
    """Discrete mean-curvature vector on the interface band.

    coeffs: (n_nodes, 2) nodal vectors of a degree-m field on the cut
    elements; node_ids index the background P1/P2 lattice.
    """

    def __init__(self, mesh, m, node_ids, coeffs, active_elems, stamp):
        self.mesh = mesh
        self.m = m
        self.node_ids = node_ids
        self.coeffs = coeffs
        self.active_elems = active_elems
        self.stamp = stamp  # the P1 level set the geometry came from
        self._local = -np.ones(
            (mesh.num_vertices + mesh.num_faces) if m == 2 else mesh.num_vertices,
            dtype=np.int64)
        self._local[node_ids] = np.arange(len(node_ids))

    def eval_at(self, tri_ids, bary):
        """Values at (triangle, barycentric) points inside active elements."""
        if self.m == 1:
            en = self.mesh.triangles[np.asarray(tri_ids)]
            shape = p1_basis(bary)
        else:
            en = p2_element_nodes(self.mesh)[np.asarray(tri_ids)]
            shape = p2_basis(bary)
        loc = self._local[en]
        if np.any(loc < 0):
            raise CurvatureError("curvature field evaluated outside its band")
        return np.einsum("nk,nkd->nd", shape, self.coeffs[loc])


def _band_faces(mesh, active_mask):
    ft = mesh.face_tris
    interior = ft[:, 1] >= 0
    keep = interior & active_mask[ft[:, 0]] & active_mask[np.maximum(ft[:, 1], 0)]
    return np.where(keep)[0]


def solve_curvature(mmap, phiq, m=None, c_F=1e-2, c_Gamma=1e-2, seg_npts=3):
    """Assemble and solve the stabilized curvature system on the cut band.

    Mass and load are integrated on the planar interface with the metric
    factors |det(D theta)| * |(D theta)^-T n| of the deformation; the
    stabilization adds face jumps and interface normal derivatives of order
    1..m with weights c h^(2j-2).
    """
    mesh = mmap.mesh
    if m is None:
        m = phiq.q
    if m not in (1, 2):
        raise ValueError("curvature degree m must be 1 or 2")
    if c_F <= 0 or c_Gamma <= 0:
        raise ValueError("stabilization constants must be positive")
    iface = reconstruct_interface(mmap.phi1)
    if iface.num_segments == 0:
        raise CurvatureError("empty interface: no curvature system to solve")
    h = mesh.h

    active = mmap.active_elems
    active_mask = np.zeros(mesh.num_triangles, dtype=bool)
    active_mask[active] = True
    if m == 1:
        elem_nodes_all = mesh.triangles
        nl = mesh.num_vertices
    else:
        elem_nodes_all = p2_element_nodes(mesh)
        nl = mesh.num_vertices + mesh.num_faces
    node_ids = np.unique(elem_nodes_all[active].reshape(-1))
    local = -np.ones(nl, dtype=np.int64)
    local[node_ids] = np.arange(len(node_ids))
    nn = len(node_ids)
    nk = elem_nodes_all.shape[1]

    # interface quadrature with mapped metric
    x_ref, w_ref = segment_rule(seg_npts)
    own = np.repeat(iface.owner, seg_npts)
    p0 = iface.endpoints[:, 0][:, None, :]
    p1 = iface.endpoints[:, 1][:, None, :]
    pts = (p0 + x_ref[None, :, None] * (p1 - p0)).reshape(-1, 2)
    wts = (iface.lengths[:, None] * w_ref[None, :]).reshape(-1)
    bary = mesh.barycentric(own, pts)
    n1 = np.repeat(iface.normals, seg_npts, axis=0)

    D = mmap.jacobian(own, bary)
    detD = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    # N = D^-T n1  (2x2 inverse transpose, explicit)
    Ninv = np.empty_like(n1)
    Ninv[:, 0] = (D[:, 1, 1] * n1[:, 0] - D[:, 1, 0] * n1[:, 1]) / detD
    Ninv[:, 1] = (-D[:, 0, 1] * n1[:, 0] + D[:, 0, 0] * n1[:, 1]) / detD
    normN = np.linalg.norm(Ninv, axis=1)
    J = np.abs(detD) * normN
    nt = Ninv / normN[:, None]

    if m == 1:
        shape = p1_basis(bary)
        gshape = np.broadcast_to(mesh.grads[own][:, :, :], (len(own), 3, 2))
    else:
        shape = p2_basis(bary)
        gshape = p2_grad_single(bary, mesh.grads[own])
    # physical (mapped) gradients D^-T grad
    gmap = np.empty_like(gshape)
    gmap[..., 0] = (D[:, None, 1, 1] * gshape[..., 0] - D[:, None, 1, 0] * gshape[..., 1])
    gmap[..., 1] = (-D[:, None, 0, 1] * gshape[..., 0] + D[:, None, 0, 0] * gshape[..., 1])
    gmap /= detD[:, None, None]
    tang = gmap - np.einsum("nk,nd->nkd", np.einsum("nkd,nd->nk", gmap, nt), nt)

    wJ = wts * J
    en_own = elem_nodes_all[own]
    mass = np.einsum("n,nk,nl->nkl", wJ, shape, shape)
    rhs_loc = -np.einsum("n,nkd->nkd", wJ, tang)

    # interface normal-derivative stabilization
    dnrm = np.einsum("nkd,nd->nk", gmap, nt)
    stab_g = c_Gamma * np.einsum("n,nk,nl->nkl", wJ, dnrm, dnrm)
    if m == 2:
        hess = p2_hessian(mesh.grads[own])
        d2 = np.einsum("nd,nkde,ne->nk", nt, hess, nt)
        stab_g += c_Gamma * h ** 2 * np.einsum("n,nk,nl->nkl", wJ, d2, d2)

    rows = local[en_own]
    iik = np.repeat(rows, nk, axis=1).reshape(-1)
    jjk = np.tile(rows, (1, nk)).reshape(-1)
    vals_scalar = (mass + stab_g).reshape(-1)

    # face-jump stabilization on the band
    faces = _band_faces(mesh, active_mask)
    frows = fcols = fvals = np.zeros(0)
    if len(faces) > 0:
        frows, fcols, fvals = _face_jump_terms(mesh, faces, elem_nodes_all, local,
                                               m, c_F, h)

    all_rows = np.concatenate([iik, frows]).astype(np.int64)
    all_cols = np.concatenate([jjk, fcols]).astype(np.int64)
    all_vals = np.concatenate([vals_scalar, fvals])
    A = sp.coo_matrix((all_vals, (all_rows, all_cols)), shape=(nn, nn)).tocsc()

    rhs = np.zeros((nn, 2))
    np.add.at(rhs, rows.reshape(-1), rhs_loc.reshape(-1, 2))

    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise CurvatureError(f"curvature system is singular: {exc}") from exc
    coeffs = np.stack([lu.solve(rhs[:, 0]), lu.solve(rhs[:, 1])], axis=1)
    return CurvatureField(mesh, m, node_ids, coeffs, active, mmap.phi1)


def _face_jump_terms(mesh, faces, elem_nodes_all, local, m, c_F, h):
    """Jump penalties sum_j c_F h^(2j-2) ([D^j_n u],[D^j_n v])_F, j = 1..m."""
    x_ref, w_ref = segment_rule(2)
    tpair = mesh.face_tris[faces]
    nF = mesh.face_normals[faces]
    p0 = mesh.vertices[mesh.faces[faces, 0]]
    p1 = mesh.vertices[mesh.faces[faces, 1]]
    lengths = mesh.face_lengths[faces]
    nk = elem_nodes_all.shape[1]

    rows_all, cols_all, vals_all = [], [], []
    pts = (p0[:, None, :] + x_ref[None, :, None] * (p1 - p0)[:, None, :])
    # jump coefficient layout: 2*nk slots, first element's nodes then second's
    en = np.concatenate([elem_nodes_all[tpair[:, 0]], elem_nodes_all[tpair[:, 1]]],
                        axis=1)
    loc = local[en]
    # nodes outside the band (coefficient slots that do not exist) only occur
    # for neighbors partially outside; the band is built so both are active
    for q in range(len(x_ref)):
        pq = pts[:, q]
        jumps1 = np.empty((len(faces), 2 * nk))
        for side in (0, 1):
            tri = tpair[:, side]
            bary = mesh.barycentric(tri, pq)
            if m == 1:
                g = mesh.grads[tri]
            else:
                g = p2_grad_single(bary, mesh.grads[tri])
            dn = np.einsum("nkd,nd->nk", g, nF)
            sgn = 1.0 if side == 0 else -1.0
            jumps1[:, side * nk:(side + 1) * nk] = sgn * dn
        w = w_ref[q] * lengths * c_F
        vals = np.einsum("n,nk,nl->nkl", w, jumps1, jumps1)
        rows_all.append(np.repeat(loc, 2 * nk, axis=1).reshape(-1))
        cols_all.append(np.tile(loc, (1, 2 * nk)).reshape(-1))
        vals_all.append(vals.reshape(-1))

    if m == 2:
        hess = p2_hessian(mesh.grads)
        jumps2 = np.empty((len(faces), 2 * nk))
        for side in (0, 1):
            tri = tpair[:, side]
            d2 = np.einsum("nd,nkde,ne->nk", nF, hess[tri], nF)
            sgn = 1.0 if side == 0 else -1.0
            jumps2[:, side * nk:(side + 1) * nk] = sgn * d2
        w = lengths * c_F * h ** 2
        vals = np.einsum("n,nk,nl->nkl", w, jumps2, jumps2)
        rows_all.append(np.repeat(loc, 2 * nk, axis=1).reshape(-1))
        cols_all.append(np.tile(loc, (1, 2 * nk)).reshape(-1))
        vals_all.append(vals.reshape(-1))

    return (np.concatenate(rows_all), np.concatenate(cols_all),
            np.concatenate(vals_all))


def surface_tension_term(H, sigma, iface, w1, w2, seg_npts=2):
    """Load contributions sigma * (H, <v>) over the planar interface.

    Returns per-phase nodal loads on the fine mesh, using the weighted
    average <v> = w2 v_1 + w1 v_2 (w1, w2 scalars or per-segment arrays).
    The interface must come from the same level set the curvature was
    solved on.
    """
    if H.stamp is not None and iface_stamp_mismatch(H, iface):
        raise CurvatureError("curvature field and interface geometry differ")
    mesh = H.mesh
    loads = [np.zeros((mesh.num_vertices, 2)) for _ in range(2)]
    if sigma == 0.0 or iface.num_segments == 0:
        return loads
    pts, wts = iface.gauss_points(seg_npts)
    own = np.repeat(iface.owner, seg_npts)
    flat = pts.reshape(-1, 2)
    bary = mesh.barycentric(own, flat)
    Hv = H.eval_at(own, bary)  # (n, 2)
    shp = p1_basis(bary)
    w = wts.reshape(-1)
    contrib = np.einsum("n,nk,nd->nkd", sigma * w, shp, Hv)
    nodes = mesh.triangles[own]
    for phase, wgt in ((0, w2), (1, w1)):
        wgt = np.repeat(wgt, seg_npts) if np.ndim(wgt) else float(wgt)
        scaled = contrib * (wgt[:, None, None] if np.ndim(wgt) else wgt)
        np.add.at(loads[phase], nodes.reshape(-1), scaled.reshape(-1, 2))
    return loads


def iface_stamp_mismatch(H, iface):
    own = iface.owner
    mask = np.zeros(H.mesh.num_triangles, dtype=bool)
    mask[H.active_elems] = True
    return not np.all(mask[own])
