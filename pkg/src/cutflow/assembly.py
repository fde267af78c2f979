"""Spatial forms and the space-time slab system.

Velocity is piecewise linear on the fine active meshes (one field per
fluid), pressure piecewise linear on the coarse active meshes, both times
polynomials of degree r in time.  Interface and boundary conditions enter
weakly (symmetric Nitsche terms with weighted averages); face ghost
penalties extend coercivity and inf-sup control over the whole active
meshes so the system conditioning does not depend on how cells are cut.

The slab system is composed from per-quadrature-time spatial operators on a
"space slice" (all velocity and pressure unknowns of one time-polynomial
coefficient); time coupling is a Kronecker product with small dense factor
matrices, plus one pressure-mean Lagrange multiplier per constraint time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .cutgeom import LABEL_CUT
from .curvature import CurvatureError
from .elements import p1_basis
from .quadrature import triangle_rule

DIRICHLET, SLIP = "dirichlet", "slip"


@dataclass
class FluidParams:
    """Material data and problem data callbacks.

    f(t, points, phase) -> (n, 2) body force per unit volume;
    g(t, points) -> (n, 2) boundary velocity data.
    """
    mu1: float
    mu2: float
    rho1: float
    rho2: float
    sigma: float = 0.0
    f: Optional[Callable] = None
    g: Optional[Callable] = None

    def __post_init__(self):
        if self.mu1 <= 0 or self.mu2 <= 0:
            raise ValueError("viscosities must be positive")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("densities must be nonnegative")
        if self.sigma < 0:
            raise ValueError("surface tension coefficient must be nonnegative")

    @property
    def mu(self):
        return (self.mu1, self.mu2)

    @property
    def rho(self):
        return (self.rho1, self.rho2)

    @property
    def inertial(self):
        return self.rho1 > 0 or self.rho2 > 0


@dataclass
class BoundaryConditions:
    """Per-side boundary treatment: 'dirichlet' or 'slip' (u.n given)."""
    left: str = DIRICHLET
    right: str = DIRICHLET
    bottom: str = DIRICHLET
    top: str = DIRICHLET

    def side_type(self, side):
        return (self.left, self.right, self.bottom, self.top)[side]


class NitscheParams:
    """Interface weights and penalty coefficients.

    Weights satisfy w1 + w2 = 1 on every cut element.  lambda_gamma is the
    interface penalty per cut fine element; boundary penalties are computed
    per boundary face on demand.
    """

    def __init__(self, w1, w2, lambda_gamma, mu, C, D, G, H):
        self.w1 = w1
        self.w2 = w2
        self.lambda_gamma = lambda_gamma
        self.mu = mu
        self.C, self.D, self.G, self.H = C, D, G, H

    def boundary_lambda(self, mesh, faces, phase):
        """lambda_dOmega = (mu_i / h_K)(G + H * gamma_bK / alpha_K) per face."""
        tri = mesh.face_tris[faces, 0]
        h_K = mesh.tri_diams[tri]
        alpha = mesh.areas[tri] / h_K ** 2
        # boundary measure of the adjacent element (an element in a corner
        # may carry two boundary faces)
        bmeas = np.zeros(mesh.num_triangles)
        np.add.at(bmeas, mesh.face_tris[mesh.boundary_faces, 0],
                  mesh.face_lengths[mesh.boundary_faces])
        gamma_b = bmeas[tri] / h_K
        mu_i = np.where(np.asarray(phase) == 0, self.mu[0], self.mu[1])
        return (mu_i / h_K) * (self.G + self.H * gamma_b / alpha)


def compute_nitsche_params(params, cutq, mode="viscosity", C=2.0, D=1.0,
                           G=10.0, H=10.0):
    """Averaging weights and interface penalty for the given cut state."""
    if not C > 1.0:
        raise ValueError("interface penalty constant C must exceed 1")
    if min(D, G, H) <= 0.0:
        raise ValueError("penalty constants must be positive")
    mu1, mu2 = params.mu
    ncut = len(cutq.cut_elems)
    if mode == "local_alpha":
        a1, a2 = cutq.alpha[:, 0], cutq.alpha[:, 1]
        if np.any(a1 + a2 <= 0.0):
            raise RuntimeError("cut element with vanishing area parts")
        w1 = mu2 * a1 / (mu1 * a2 + mu2 * a1)
    elif mode == "viscosity":
        w1 = np.full(ncut, mu2 / (mu1 + mu2))
    elif mode == "viscosity_density":
        rho1 = params.rho1 if params.rho1 > 0 else 1.0
        rho2 = params.rho2 if params.rho2 > 0 else 1.0
        n1, n2 = mu1 / rho1, mu2 / rho2
        w1 = np.full(ncut, n2 / (n1 + n2))
    else:
        raise ValueError(f"unknown Nitsche weight mode {mode!r}")
    w2 = 1.0 - w1
    mu_avg = w1 * mu1 + w2 * mu2
    alpha = cutq.alpha.sum(axis=1)
    lam = (mu_avg / cutq.h_K) * (D + C * cutq.gamma / alpha)
    return NitscheParams(w1, w2, lam, params.mu, C, D, G, H)


class DofMap:
    """Space-slice unknown numbering for one slab.

    Layout of a slice: [vel phase1, vel phase2, p phase1, p phase2]; the
    full system stacks r+1 slices followed by the pressure-mean multipliers.
    Nodes on both active meshes carry independent unknowns per phase.
    """

    def __init__(self, slab, r):
        self.slab = slab
        self.r = r
        fine, coarse = slab.fine, slab.coarse
        self.vnodes = slab.active_nodes_fine
        self.pnodes = slab.active_nodes_coarse
        self.vlocal = []
        self.plocal = []
        for nodes, mesh in ((self.vnodes[0], fine), (self.vnodes[1], fine)):
            loc = -np.ones(mesh.num_vertices, dtype=np.int64)
            loc[nodes] = np.arange(len(nodes))
            self.vlocal.append(loc)
        for nodes, mesh in ((self.pnodes[0], coarse), (self.pnodes[1], coarse)):
            loc = -np.ones(mesh.num_vertices, dtype=np.int64)
            loc[nodes] = np.arange(len(nodes))
            self.plocal.append(loc)
        nv = [len(n) for n in self.vnodes]
        npr = [len(n) for n in self.pnodes]
        self.voff = [0, 2 * nv[0]]
        self.poff = [2 * (nv[0] + nv[1]), 2 * (nv[0] + nv[1]) + npr[0]]
        self.slice_size = 2 * (nv[0] + nv[1]) + npr[0] + npr[1]
        self.n_mult = r + 1
        self.total = (r + 1) * self.slice_size + self.n_mult

    def vel_dofs(self, phase, nodes):
        """(n, 2) slice dof ids for both components of fine nodes."""
        loc = self.vlocal[phase][nodes]
        base = self.voff[phase] + 2 * loc
        return np.stack([base, base + 1], axis=-1)

    def p_dofs(self, phase, nodes):
        return self.poff[phase] + self.plocal[phase][nodes]


def _scatter(rows, cols, vals, out):
    out[0].append(np.asarray(rows).reshape(-1))
    out[1].append(np.asarray(cols).reshape(-1))
    out[2].append(np.asarray(vals).reshape(-1))


def _collect(trip, shape):
    if not trip[0]:
        return sp.csr_matrix(shape)
    rows = np.concatenate(trip[0])
    cols = np.concatenate(trip[1])
    vals = np.concatenate(trip[2])
    return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


# ---------------------------------------------------------------------------
# volume contributions


def _phase_batches(geom, phase):
    """(tri_ids, points, weights) covering Omega_i: pure elements with the
    reference rule, cut elements with their sub-triangulations."""
    mesh = geom.fine
    bary, wq = triangle_rule(geom.cutq.order)
    out = []
    pure = geom.pure_fine[phase]
    if len(pure):
        corners = mesh.vertices[mesh.triangles[pure]]
        pts = np.einsum("qk,nkd->nqd", bary, corners)
        wts = mesh.areas[pure, None] * wq[None, :]
        out.append((pure, pts, wts))
    ptsc, wtsc = geom.cutq.points_weights(phase)
    if len(geom.cutq.sub_owner[phase]):
        out.append((geom.cutq.sub_owner[phase], ptsc, wtsc))
    return out


def assemble_a(geom, params, nit, dofs, bc):
    """Viscous volume term plus symmetric Nitsche interface/boundary terms."""
    mesh = geom.fine
    S = dofs.slice_size
    trip = ([], [], [])

    # volume 2 mu eps(u):eps(v); the integrand is constant per element so
    # only the part areas enter
    for phase in (0, 1):
        mu = params.mu[phase]
        for elems, area in _phase_pieces(geom, phase):
            g = mesh.grads[elems]  # (n, 3, 2)
            gg = np.einsum("nkd,nld->nkl", g, g)
            loc = np.einsum("n,nklab->nkalb", mu * area,
                            gg[:, :, :, None, None] * np.eye(2)[None, None, None]
                            + np.einsum("nlb,nka->nklab", g, g)
                            ).reshape(len(elems), 6, 6)
            dof = dofs.vel_dofs(phase, mesh.triangles[elems]).reshape(len(elems), 6)
            _scatter(np.repeat(dof, 6, axis=1), np.tile(dof, (1, 6)), loc, trip)

    _interface_a_terms(geom, params, nit, dofs, trip)
    _boundary_a_terms(geom, params, nit, dofs, bc, trip)
    return _collect(trip, (S, S))


def _phase_pieces(geom, phase):
    """(elements, areas) pairs covering Omega_i for constant integrands."""
    mesh = geom.fine
    out = []
    pure = geom.pure_fine[phase]
    if len(pure):
        out.append((pure, mesh.areas[pure]))
    cq = geom.cutq
    if len(cq.cut_elems):
        out.append((cq.cut_elems, cq.areas_cut[:, phase]))
    return out


def _interface_a_terms(geom, params, nit, dofs, trip):
    """-({2 mu eps(u) n},[v]) - ([u],{2 mu eps(v) n}) + lambda([u],[v])."""
    iface = geom.iface
    if iface.num_segments == 0:
        return
    mesh = geom.fine
    pts, wts = iface.gauss_points(2)
    nq = pts.shape[1]
    own = iface.owner
    n = iface.normals
    g = mesh.grads[own]  # (E, 3, 2)
    gn = np.einsum("nkd,nd->nk", g, n)
    # T[e, k, a, b] = component b of 2 mu eps(N_k e_a) n (without mu)
    T = gn[:, :, None, None] * np.eye(2)[None, None] \
        + np.einsum("na,nkb->nkab", n, g)
    shp = [mesh.barycentric(own, pts[:, q]) for q in range(nq)]
    dof = [dofs.vel_dofs(i, mesh.triangles[own]).reshape(len(own), 6) for i in (0, 1)]
    sgn = (1.0, -1.0)        # jump [f] = f_1 - f_2
    wavg = (nit.w1, nit.w2)  # {f} = w1 f1 + w2 f2

    for q in range(nq):
        w = wts[:, q]
        Nl = shp[q]  # (E, 3) P1 values
        for i_s in (0, 1):       # phase carrying the stress average
            Tq = params.mu[i_s] * T  # (E,3,2,2)
            for i_j in (0, 1):   # phase carrying the jump
                coef = -wavg[i_s] * sgn[i_j] * w
                loc = np.einsum("n,nkab,nl->nkalb", coef, Tq, Nl).reshape(len(own), 6, 6)
                # -({2 mu eps(u) n},[v]): stress side is the trial function
                _scatter(np.repeat(dof[i_j], 6, axis=1), np.tile(dof[i_s], (1, 6)),
                         np.transpose(loc, (0, 2, 1)), trip)
                # -([u],{2 mu eps(v) n}): stress side is the test function
                _scatter(np.repeat(dof[i_s], 6, axis=1), np.tile(dof[i_j], (1, 6)),
                         loc, trip)
        lam = nit.lambda_gamma
        for i_tr in (0, 1):
            for i_te in (0, 1):
                coef = lam * sgn[i_tr] * sgn[i_te] * w
                mass = np.einsum("n,nk,nl->nkl", coef, Nl, Nl)
                loc = np.einsum("nkl,ab->nkalb", mass, np.eye(2)).reshape(len(own), 6, 6)
                _scatter(np.repeat(dof[i_te], 6, axis=1), np.tile(dof[i_tr], (1, 6)),
                         loc, trip)


def _boundary_face_data(geom, bc):
    """Boundary faces grouped by 'dirichlet'/'slip' with phase and geometry."""
    mesh = geom.fine
    bf = mesh.boundary_faces
    tri = mesh.face_tris[bf, 0]
    labels = geom.labels_fine[tri]
    if np.any(labels == LABEL_CUT):
        raise RuntimeError("cut element on the boundary; interface reached the wall")
    phase = (labels > 0).astype(np.int64)
    sides = mesh.face_sides[bf]
    kinds = np.array([bc.side_type(s) == SLIP for s in sides])
    return bf, tri, phase, kinds


def _boundary_a_terms(geom, params, nit, dofs, bc, trip):
    mesh = geom.fine
    bf, tri, phase, slip = _boundary_face_data(geom, bc)
    if len(bf) == 0:
        return
    lam = nit.boundary_lambda(mesh, bf, phase)
    mu = np.where(phase == 0, params.mu[0], params.mu[1])
    n = mesh.face_normals[bf]
    g = mesh.grads[tri]
    gn = np.einsum("nkd,nd->nk", g, n)
    T = mu[:, None, None, None] * (gn[:, :, None, None] * np.eye(2)[None, None]
                                   + np.einsum("na,nkb->nkab", n, g))
    p0 = mesh.vertices[mesh.faces[bf, 0]]
    p1 = mesh.vertices[mesh.faces[bf, 1]]
    lengths = mesh.face_lengths[bf]
    from .quadrature import segment_rule
    xr, wr = segment_rule(2)
    dof = np.empty((len(bf), 6), dtype=np.int64)
    for i in (0, 1):
        m = phase == i
        dof[m] = dofs.vel_dofs(i, mesh.triangles[tri[m]]).reshape(-1, 6)

    for q in range(len(xr)):
        ptq = p0 + xr[q] * (p1 - p0)
        w = wr[q] * lengths
        Nl = mesh.barycentric(tri, ptq)
        for mset, is_slip in ((~slip, False), (slip, True)):
            if not mset.any():
                continue
            idx = np.where(mset)[0]
            Tq, Nq, wq_, nq_ = T[idx], Nl[idx], w[idx], n[idx]
            dq, lamq = dof[idx], lam[idx]
            if not is_slip:
                cons = np.einsum("n,nkab,nl->nlbka", -wq_, Tq, Nq).reshape(len(idx), 6, 6)
                pen = np.einsum("n,nk,nl,ab->nkalb", lamq * wq_, Nq, Nq,
                                np.eye(2)).reshape(len(idx), 6, 6)
            else:
                Sv = np.einsum("nb,nkab->nka", nq_, Tq)  # n . (2 mu eps n), scalar per (k,a)
                vn = np.einsum("nl,nb->nlb", Nq, nq_)
                cons = np.einsum("n,nka,nlb->nlbka", -wq_, Sv, vn).reshape(len(idx), 6, 6)
                pen = np.einsum("n,nka,nlb->nkalb", lamq * wq_, vn, vn
                                ).reshape(len(idx), 6, 6)
            rows = np.repeat(dq, 6, axis=1)
            cols = np.tile(dq, (1, 6))
            _scatter(rows, cols, cons, trip)                      # -(2mu eps(u)n, v)
            _scatter(rows, cols, np.transpose(cons, (0, 2, 1)), trip)  # symmetric term
            _scatter(rows, cols, pen, trip)


def assemble_b(geom, params, nit, dofs, variant="b2"):
    """Pressure-velocity coupling b(u, q): rows pressure, cols velocity."""
    if variant not in ("b1", "b2"):
        raise ValueError("b-form variant must be 'b1' or 'b2'")
    mesh, coarse = geom.fine, geom.coarse
    S = dofs.slice_size
    trip = ([], [], [])
    parent = mesh.parent_map

    for phase in (0, 1):
        for elems, pts, wts in _phase_batches(geom, phase):
            par = parent[elems]
            g = mesh.grads[elems]
            vdof = dofs.vel_dofs(phase, mesh.triangles[elems]).reshape(len(elems), 6)
            pdof = dofs.p_dofs(phase, coarse.triangles[par])
            npts = pts.shape[1]
            if variant == "b1":
                # (div v, q): div(N_k e_a) = g[k, a]
                psi = np.stack([coarse.barycentric(par, pts[:, q])
                                for q in range(npts)], axis=1)  # (n, q, 3)
                wpsi = np.einsum("nq,nqm->nm", wts, psi)
                loc = np.einsum("nka,nm->nmka", g, wpsi).reshape(len(elems), 3, 6)
            else:
                # -(v, grad q)
                gq = coarse.grads[par]  # (n, 3, 2)
                shp = np.stack([mesh.barycentric(elems, pts[:, q])
                                for q in range(npts)], axis=1)
                wN = np.einsum("nq,nqk->nk", wts, shp)
                loc = -np.einsum("nk,nma->nmka", wN, gq).reshape(len(elems), 3, 6)
            _scatter(np.repeat(pdof, 6, axis=1), np.tile(vdof, (1, 3)), loc, trip)

    _interface_b_terms(geom, nit, dofs, variant, trip)
    if variant == "b1":
        _boundary_b_terms(geom, dofs, trip)
    return _collect(trip, (S, S))


def _interface_b_terms(geom, nit, dofs, variant, trip):
    iface = geom.iface
    if iface.num_segments == 0:
        return
    mesh, coarse = geom.fine, geom.coarse
    pts, wts = iface.gauss_points(2)
    own, par = iface.owner, iface.coarse_owner
    n = iface.normals
    sgn = (1.0, -1.0)
    vdof = [dofs.vel_dofs(i, mesh.triangles[own]).reshape(len(own), 6) for i in (0, 1)]
    pdof = [dofs.p_dofs(i, coarse.triangles[par]) for i in (0, 1)]
    for q in range(pts.shape[1]):
        w = wts[:, q]
        Nv = mesh.barycentric(own, pts[:, q])
        Np = coarse.barycentric(par, pts[:, q])
        vn = np.einsum("nk,na->nka", Nv, n)  # (v . n) coefficients
        for i_v in (0, 1):
            for i_p in (0, 1):
                if variant == "b1":
                    # -([v.n], {q})
                    coef = -sgn[i_v] * (nit.w1 if i_p == 0 else nit.w2) * w
                else:
                    # +([q], <v.n>), <f> = w2 f1 + w1 f2
                    coef = sgn[i_p] * (nit.w2 if i_v == 0 else nit.w1) * w
                loc = np.einsum("n,nka,nm->nmka", coef, vn, Np).reshape(len(own), 3, 6)
                _scatter(np.repeat(pdof[i_p], 6, axis=1), np.tile(vdof[i_v], (1, 3)),
                         loc, trip)


def _boundary_b_terms(geom, dofs, trip):
    """-(v.n, q) over the whole boundary (b1 only)."""
    mesh, coarse = geom.fine, geom.coarse
    bf = mesh.boundary_faces
    tri = mesh.face_tris[bf, 0]
    phase = (geom.labels_fine[tri] > 0).astype(np.int64)
    par = mesh.parent_map[tri]
    n = mesh.face_normals[bf]
    p0 = mesh.vertices[mesh.faces[bf, 0]]
    p1 = mesh.vertices[mesh.faces[bf, 1]]
    from .quadrature import segment_rule
    xr, wr = segment_rule(2)
    vdof = np.empty((len(bf), 6), dtype=np.int64)
    pdof = np.empty((len(bf), 3), dtype=np.int64)
    for i in (0, 1):
        m = phase == i
        if m.any():
            vdof[m] = dofs.vel_dofs(i, mesh.triangles[tri[m]]).reshape(-1, 6)
            pdof[m] = dofs.p_dofs(i, coarse.triangles[par[m]])
    for q in range(len(xr)):
        ptq = p0 + xr[q] * (p1 - p0)
        w = wr[q] * mesh.face_lengths[bf]
        Nv = mesh.barycentric(tri, ptq)
        Np = coarse.barycentric(par, ptq)
        loc = np.einsum("n,nk,na,nm->nmka", -w, Nv, n, Np).reshape(len(bf), 3, 6)
        _scatter(np.repeat(pdof, 6, axis=1), np.tile(vdof, (1, 3)), loc, trip)


def assemble_mass_rho(geom, params, dofs):
    """(rho u, v) over both fluids at one time."""
    mesh = geom.fine
    trip = ([], [], [])
    for phase in (0, 1):
        rho = params.rho[phase]
        if rho == 0.0:
            continue
        for elems, pts, wts in _phase_batches(geom, phase):
            npts = pts.shape[1]
            shp = np.stack([mesh.barycentric(elems, pts[:, q]) for q in range(npts)],
                           axis=1)
            mloc = rho * np.einsum("nq,nqk,nql->nkl", wts, shp, shp)
            loc = np.einsum("nkl,ab->nkalb", mloc, np.eye(2)).reshape(len(elems), 6, 6)
            dof = dofs.vel_dofs(phase, mesh.triangles[elems]).reshape(len(elems), 6)
            _scatter(np.repeat(dof, 6, axis=1), np.tile(dof, (1, 6)), loc, trip)
    return _collect(trip, (dofs.slice_size, dofs.slice_size))


def assemble_conv(geom, params, dofs, u_lin):
    """(rho (beta . grad) u, v) with a known transport field per fluid."""
    mesh = geom.fine
    trip = ([], [], [])
    for phase in (0, 1):
        rho = params.rho[phase]
        if rho == 0.0:
            continue
        for elems, pts, wts in _phase_batches(geom, phase):
            npts = pts.shape[1]
            flat = pts.reshape(-1, 2)
            rep = np.repeat(elems, npts)
            bary = mesh.barycentric(rep, flat)
            beta = u_lin.sample_phase(phase, rep, bary).reshape(len(elems), npts, 2)
            g = mesh.grads[elems]
            bg = np.einsum("nqd,nkd->nqk", beta, g)  # beta . grad N_k
            shp = np.stack([mesh.barycentric(elems, pts[:, q]) for q in range(npts)],
                           axis=1)
            cloc = rho * np.einsum("nq,nqk,nql->nkl", wts, bg, shp)
            loc = np.einsum("nkl,ab->nkalb", cloc, np.eye(2)).reshape(len(elems), 6, 6)
            dof = dofs.vel_dofs(phase, mesh.triangles[elems]).reshape(len(elems), 6)
            _scatter(np.repeat(dof, 6, axis=1), np.tile(dof, (1, 6)), loc, trip)
    return _collect(trip, (dofs.slice_size, dofs.slice_size))


def assemble_l(geom, params, nit, dofs, bc, t, curvature=None):
    """Load slice: body force, surface tension, boundary data terms."""
    mesh, coarse = geom.fine, geom.coarse
    vec = np.zeros(dofs.slice_size)

    if params.f is not None:
        for phase in (0, 1):
            for elems, pts, wts in _phase_batches(geom, phase):
                npts = pts.shape[1]
                flat = pts.reshape(-1, 2)
                fv = np.asarray(params.f(t, flat, phase)).reshape(len(elems), npts, 2)
                shp = np.stack([mesh.barycentric(elems, pts[:, q])
                                for q in range(npts)], axis=1)
                loc = np.einsum("nq,nqk,nqd->nkd", wts, shp, fv)
                dof = dofs.vel_dofs(phase, mesh.triangles[elems])
                np.add.at(vec, dof.reshape(-1, 2)[:, 0], loc.reshape(-1, 2)[:, 0])
                np.add.at(vec, dof.reshape(-1, 2)[:, 1], loc.reshape(-1, 2)[:, 1])

    if params.sigma > 0.0:
        if curvature is None:
            raise CurvatureError("surface tension is on but no curvature field "
                                 "was provided for this time point")
        from .curvature import surface_tension_term
        loads = surface_tension_term(curvature, params.sigma, geom.iface,
                                     nit.w1, nit.w2)
        for phase in (0, 1):
            nodes = dofs.vnodes[phase]
            dof = dofs.vel_dofs(phase, nodes)
            np.add.at(vec, dof[:, 0], loads[phase][nodes, 0])
            np.add.at(vec, dof[:, 1], loads[phase][nodes, 1])

    if params.g is not None:
        _boundary_l_terms(geom, params, nit, dofs, bc, t, vec)
    return vec


def _boundary_l_terms(geom, params, nit, dofs, bc, t, vec):
    mesh, coarse = geom.fine, geom.coarse
    bf, tri, phase, slip = _boundary_face_data(geom, bc)
    if len(bf) == 0:
        return
    lam = nit.boundary_lambda(mesh, bf, phase)
    mu = np.where(phase == 0, params.mu[0], params.mu[1])
    n = mesh.face_normals[bf]
    g = mesh.grads[tri]
    gn = np.einsum("nkd,nd->nk", g, n)
    T = mu[:, None, None, None] * (gn[:, :, None, None] * np.eye(2)[None, None]
                                   + np.einsum("na,nkb->nkab", n, g))
    p0 = mesh.vertices[mesh.faces[bf, 0]]
    p1 = mesh.vertices[mesh.faces[bf, 1]]
    par = mesh.parent_map[tri]
    from .quadrature import segment_rule
    xr, wr = segment_rule(2)
    vdof = np.empty((len(bf), 6), dtype=np.int64)
    pdof = np.empty((len(bf), 3), dtype=np.int64)
    for i in (0, 1):
        m = phase == i
        if m.any():
            vdof[m] = dofs.vel_dofs(i, mesh.triangles[tri[m]]).reshape(-1, 6)
            pdof[m] = dofs.p_dofs(i, coarse.triangles[par[m]])

    for q in range(len(xr)):
        ptq = p0 + xr[q] * (p1 - p0)
        w = wr[q] * mesh.face_lengths[bf]
        gv = np.asarray(params.g(t, ptq))
        Nv = mesh.barycentric(tri, ptq)
        Np = coarse.barycentric(par, ptq)
        gn_dot = np.einsum("nd,nd->n", gv, n)
        # -(g.n, q) on the whole boundary
        locp = np.einsum("n,n,nm->nm", -w, gn_dot, Np)
        np.add.at(vec, pdof.reshape(-1), locp.reshape(-1))
        for mset, is_slip in ((~slip, False), (slip, True)):
            if not mset.any():
                continue
            idx = np.where(mset)[0]
            if not is_slip:
                # -(g, 2 mu eps(v) n) + lambda (g, v)
                locv = np.einsum("n,nb,nkab->nka", -w[idx], gv[idx], T[idx]) \
                    + np.einsum("n,nk,na->nka", (lam * w)[idx], Nv[idx], gv[idx])
            else:
                Sv = np.einsum("nb,nkab->nka", n[idx], T[idx])
                locv = np.einsum("n,nka->nka", -(w * gn_dot)[idx], Sv) \
                    + np.einsum("n,nk,na->nka", (lam * w * gn_dot)[idx], Nv[idx], n[idx])
            np.add.at(vec, vdof[idx].reshape(-1),
                      locv.reshape(len(idx), 3, 2).reshape(-1))


def assemble_ghost(kind, slab, params, dofs, const):
    """Face jump penalties over the slab's ghost-face sets.

    kind 'velocity': C_u mu_i h ([nF.grad u],[nF.grad v])_F on fine faces;
    kind 'pressure': C_p mu_i^-1 h^3 ([nF.grad p],[nF.grad q])_F on coarse.
    The mesh scale h is the coarse background mesh size.
    """
    h = slab.coarse.h
    trip = ([], [], [])
    S = dofs.slice_size
    for phase in (0, 1):
        if kind == "velocity":
            mesh = slab.fine
            faces = slab.ghost_faces_fine[phase]
            coef = const * params.mu[phase] * h
        elif kind == "pressure":
            mesh = slab.coarse
            faces = slab.ghost_faces_coarse[phase]
            coef = const * h ** 3 / params.mu[phase]
        else:
            raise ValueError("ghost penalty kind must be 'velocity' or 'pressure'")
        if len(faces) == 0:
            continue
        tpair = mesh.face_tris[faces]
        nF = mesh.face_normals[faces]
        g0 = np.einsum("nkd,nd->nk", mesh.grads[tpair[:, 0]], nF)
        g1 = np.einsum("nkd,nd->nk", mesh.grads[tpair[:, 1]], nF)
        c = np.concatenate([g0, -g1], axis=1)  # jump coefficients over 6 node slots
        w = coef * mesh.face_lengths[faces]
        loc = np.einsum("n,nk,nl->nkl", w, c, c)
        nodes = np.concatenate([mesh.triangles[tpair[:, 0]],
                                mesh.triangles[tpair[:, 1]]], axis=1)
        if kind == "pressure":
            dof = dofs.p_dofs(phase, nodes)
            _scatter(np.repeat(dof, 6, axis=1), np.tile(dof, (1, 6)), loc, trip)
        else:
            dof = dofs.vel_dofs(phase, nodes)  # (n, 6, 2)
            for comp in (0, 1):
                d = dof[:, :, comp]
                _scatter(np.repeat(d, 6, axis=1), np.tile(d, (1, 6)), loc, trip)
    return _collect(trip, (S, S))


def assemble_constraint_row(geom, params, dofs):
    """Row of (mu^-1 p, 1) over both fluid regions at one time."""
    mesh, coarse = geom.fine, geom.coarse
    row = np.zeros(dofs.slice_size)
    for phase in (0, 1):
        inv_mu = 1.0 / params.mu[phase]
        for elems, pts, wts in _phase_batches(geom, phase):
            par = mesh.parent_map[elems]
            npts = pts.shape[1]
            psi = np.stack([coarse.barycentric(par, pts[:, q]) for q in range(npts)],
                           axis=1)
            loc = inv_mu * np.einsum("nq,nqm->nm", wts, psi)
            pdof = dofs.p_dofs(phase, coarse.triangles[par])
            np.add.at(row, pdof.reshape(-1), loc.reshape(-1))
    return row


def assemble_jump_rhs(geom, params, dofs, u_prev):
    """(rho u(t_n^-), v(t_n^+)) over the slab-start geometry."""
    mesh = geom.fine
    vec = np.zeros(dofs.slice_size)
    for phase in (0, 1):
        rho = params.rho[phase]
        if rho == 0.0:
            continue
        for elems, pts, wts in _phase_batches(geom, phase):
            npts = pts.shape[1]
            flat = pts.reshape(-1, 2)
            rep = np.repeat(elems, npts)
            bary = mesh.barycentric(rep, flat)
            uv = u_prev.sample_phase(phase, rep, bary).reshape(len(elems), npts, 2)
            shp = np.stack([mesh.barycentric(elems, pts[:, q]) for q in range(npts)],
                           axis=1)
            loc = rho * np.einsum("nq,nqk,nqd->nkd", wts, shp, uv)
            dof = dofs.vel_dofs(phase, mesh.triangles[elems])
            np.add.at(vec, dof.reshape(-1, 2)[:, 0], loc.reshape(-1, 2)[:, 0])
            np.add.at(vec, dof.reshape(-1, 2)[:, 1], loc.reshape(-1, 2)[:, 1])
    return vec


# ---------------------------------------------------------------------------
# slab composition


class SlabSystem:
    """Assembled space-time slab: sparse matrix, right-hand side, dof map."""

    def __init__(self, matrix, rhs, dofs, quad, r, fixed_ops=None):
        self.matrix = matrix
        self.rhs = rhs
        self.dofs = dofs
        self.quad = quad
        self.r = r
        self.fixed_ops = fixed_ops

    def split(self, x):
        """Velocity/pressure coefficient views per (phase, time index)."""
        S = self.dofs.slice_size
        vel = [[None, None] for _ in range(self.r + 1)]
        pres = [[None, None] for _ in range(self.r + 1)]
        for j in range(self.r + 1):
            sl = x[j * S:(j + 1) * S]
            for i in (0, 1):
                nv = len(self.dofs.vnodes[i])
                off = self.dofs.voff[i]
                vel[j][i] = sl[off:off + 2 * nv].reshape(nv, 2)
                npr = len(self.dofs.pnodes[i])
                poff = self.dofs.poff[i]
                pres[j][i] = sl[poff:poff + npr]
        mult = x[(self.r + 1) * S:]
        return vel, pres, mult


class SlabOperators:
    """Per-quadrature-time spatial operators, cached across Picard sweeps."""

    def __init__(self, slab, params, nit_mode, nit_consts, dofs, bc, quad, r,
                 b_variant, C_p, C_u, u_prev):
        self.slab = slab
        self.params = params
        self.dofs = dofs
        self.quad = quad
        self.r = r
        dt = slab.t_end - slab.t_start
        self.dt = dt
        self.taus = [(t - slab.t_start) / dt for t in quad.points]
        self.geoms = [slab.geom_at(t) for t in quad.points]
        self.nits = []
        self.A = []
        self.B = []
        self.M = []
        self.L = []
        self.C_rows = []
        inertial = params.inertial
        for g, t in zip(self.geoms, quad.points):
            nit = compute_nitsche_params(params, g.cutq, nit_mode, *nit_consts)
            self.nits.append(nit)
            self.A.append(assemble_a(g, params, nit, dofs, bc))
            self.B.append(assemble_b(g, params, nit, dofs, b_variant))
            self.M.append(assemble_mass_rho(g, params, dofs) if inertial else None)
            self.L.append(assemble_l(g, params, nit, dofs, bc, t, g.curvature))
            self.C_rows.append(assemble_constraint_row(g, params, dofs))
        self.SU = assemble_ghost("velocity", slab, params, dofs, C_u)
        self.SP = assemble_ghost("pressure", slab, params, dofs, C_p)
        g0 = slab.geom_at(slab.t_start)
        self.M0 = assemble_mass_rho(g0, params, dofs) if inertial else None
        self.jump_rhs = (assemble_jump_rhs(g0, params, dofs, u_prev)
                         if inertial else np.zeros(dofs.slice_size))

    def compose(self, conv_ops):
        """Full slab matrix and rhs given the convection operators."""
        r, dofs, quad = self.r, self.dofs, self.quad
        S = dofs.slice_size
        taus = np.asarray(self.taus)
        w = np.asarray(quad.weights)
        nm = len(w)

        Fs = np.zeros((nm, r + 1, r + 1))
        Fdt = np.zeros((nm, r + 1, r + 1))
        for m in range(nm):
            for jt in range(r + 1):      # test index
                for j in range(r + 1):   # trial index
                    Fs[m, jt, j] = w[m] * taus[m] ** (j + jt)
                    if j >= 1:
                        Fdt[m, jt, j] = w[m] * j * taus[m] ** (j - 1 + jt) / self.dt
        Fg = np.array([[self.dt / (j + jt + 1) for j in range(r + 1)]
                       for jt in range(r + 1)])
        Fj = np.zeros((r + 1, r + 1))
        Fj[0, 0] = 1.0

        blocks = []
        for m in range(nm):
            op = self.A[m] + self.B[m] - self.B[m].T
            if conv_ops is not None and conv_ops[m] is not None:
                op = op + conv_ops[m]
            blocks.append(sp.kron(Fs[m], op, format="coo"))
            if self.M[m] is not None and r >= 1:
                blocks.append(sp.kron(Fdt[m], self.M[m], format="coo"))
        blocks.append(sp.kron(Fg, self.SU + self.SP, format="coo"))
        if self.M0 is not None:
            blocks.append(sp.kron(Fj, self.M0, format="coo"))
        K = sum(blocks).tocsr()

        rhs = np.zeros((r + 1) * S)
        for jt in range(r + 1):
            acc = np.zeros(S)
            for m in range(nm):
                acc += w[m] * taus[m] ** jt * self.L[m]
            if jt == 0:
                acc += self.jump_rhs
            rhs[jt * S:(jt + 1) * S] = acc

        # pressure-mean multipliers at the first r+1 quadrature times
        nmult = dofs.n_mult
        Crows = sp.lil_matrix((nmult, (r + 1) * S))
        for l in range(nmult):
            for j in range(r + 1):
                Crows[l, j * S:(j + 1) * S] = self.C_rows[l] * taus[l] ** j
        Crows = Crows.tocsr()
        full = sp.bmat([[K, Crows.T], [Crows, None]], format="csc")
        return full, np.concatenate([rhs, np.zeros(nmult)])
