import numpy as np
import pytest

from cutflow.curvature import (CurvatureError, build_theta_map, solve_curvature,
                               surface_tension_term)
from cutflow.cutgeom import reconstruct_interface
from cutflow.levelset import LevelSetField, init_levelset, p1_interpolate
from cutflow.mesh import build_structured_mesh, refine_uniform


def make_fields(shape, n=40, domain=(0, 1, 0, 1), q=2):
    fine = refine_uniform(build_structured_mesh(domain, n, n))
    phiq = init_levelset(shape, fine, q=q)
    return fine, phiq, p1_interpolate(phiq)


@pytest.fixture(scope="module")
def circle_setup():
    # r = 0.5 circle resolved with h = r/10
    fine = refine_uniform(build_structured_mesh((-1, 1, -1, 1), 40, 40))
    phi2 = init_levelset(("circle", (0.0, 0.0), 0.5), fine, q=2)
    phi1 = p1_interpolate(phi2)
    mmap = build_theta_map(phi1, phi2)
    H = solve_curvature(mmap, phi2, m=2)
    return fine, phi1, phi2, mmap, H


def test_theta_zero_for_affine_field():
    fine = refine_uniform(build_structured_mesh((0, 1, 0, 1), 10, 10))
    from cutflow.elements import p2_node_coords
    pts = p2_node_coords(fine)
    phi2 = LevelSetField(fine, 2, pts[:, 0] - 0.5203)
    phi1 = p1_interpolate(phi2)
    mmap = build_theta_map(phi1, phi2)
    assert np.abs(mmap.disp).max() <= 1e-12


def test_theta_displacement_second_order():
    fn = lambda p: p[:, 0] ** 2 / 0.64 + p[:, 1] ** 2 - 0.25
    maxdisp, hs = [], []
    for n in (10, 20, 40):
        fine = refine_uniform(build_structured_mesh((-1.2, 1.2, -1.2, 1.2), n, n))
        phi2 = init_levelset(("analytic", fn), fine, q=2)
        mmap = build_theta_map(p1_interpolate(phi2), phi2)
        maxdisp.append(np.linalg.norm(mmap.disp, axis=1).max())
        hs.append(fine.h)
    c = np.array(maxdisp) / np.array(hs) ** 2
    assert c.max() <= 2.0 * c.min() + 1e-12  # constant bounded across refinements


def test_mapped_residual_invariant():
    fn = lambda p: p[:, 0] ** 2 / 0.64 + p[:, 1] ** 2 - 0.25
    for n in (10, 40):
        fine = refine_uniform(build_structured_mesh((-1.2, 1.2, -1.2, 1.2), n, n))
        phi2 = init_levelset(("analytic", fn), fine, q=2)
        phi1 = p1_interpolate(phi2)
        mmap = build_theta_map(phi1, phi2)
        iface = reconstruct_interface(phi1)
        pts, wts = iface.gauss_points(3)
        own = np.repeat(iface.owner, 3)
        flat = pts.reshape(-1, 2)
        mapped = mmap.map_points(own, flat, fine.barycentric(own, flat),
                                 weights=wts.reshape(-1))
        resid = np.abs(phi2.eval_in_elements(
            _locate_owner(own), fine.barycentric(own, mapped))) if False else \
            np.abs(fn(mapped))
        assert resid.max() <= 1e-10 * fine.h


def _locate_owner(own):
    return own


def test_circle_curvature_magnitude_and_direction(circle_setup):
    fine, phi1, phi2, mmap, H = circle_setup
    iface = reconstruct_interface(phi1)
    pts, wts = iface.gauss_points(3)
    own = np.repeat(iface.owner, 3)
    flat = pts.reshape(-1, 2)
    w = wts.reshape(-1)
    Hh = H.eval_at(own, fine.barycentric(own, flat))
    mag = np.linalg.norm(Hh, axis=1)
    rel = np.sqrt(np.sum(w * (mag - 2.0) ** 2) / np.sum(w * 4.0))
    assert rel <= 0.05
    # points toward the circle center (origin)
    assert np.all(np.einsum("nd,nd->n", Hh, -flat) > 0)


def test_flat_interface_zero_curvature():
    fine = refine_uniform(build_structured_mesh((0, 1, 0, 1), 20, 20))
    phi2 = LevelSetField(fine, 2, __import__("cutflow.elements", fromlist=["x"])
                         .p2_node_coords(fine)[:, 1] - 0.5203)
    phi1 = p1_interpolate(phi2)
    mmap = build_theta_map(phi1, phi2)
    H = solve_curvature(mmap, phi2, m=2)
    iface = reconstruct_interface(phi1)
    pts, wts = iface.gauss_points(2)
    own = np.repeat(iface.owner, 2)
    flat = pts.reshape(-1, 2)
    Hh = H.eval_at(own, fine.barycentric(own, flat))
    l2 = np.sqrt((wts.reshape(-1) * (Hh ** 2).sum(1)).sum())
    assert l2 <= 1e-8


def test_curvature_system_spd(circle_setup):
    import scipy.sparse as sp
    from cutflow.curvature import _band_faces, _face_jump_terms
    fine, phi1, phi2, mmap, H = circle_setup
    # reassemble the scalar system matrix the solver used and test SPD
    from cutflow import curvature as cv
    iface = reconstruct_interface(phi1)
    # quick check via random quadratic forms on the solved field's matrix:
    # rebuild with the module's own assembly by calling solve on random rhs
    # … simpler: S_h >= 0 and mass > 0 imply SPD; verify with random vectors
    rng = np.random.default_rng(7)
    # assemble matrix indirectly: solve_curvature exposes only the solution,
    # so rebuild the matrix here with the same routine pieces
    A = _curvature_matrix(mmap, phi2, 2)
    X = rng.standard_normal((A.shape[0], 20))
    quad = np.einsum("ij,ij->j", X, A @ X)
    assert np.all(quad > 0)
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


def _curvature_matrix(mmap, phiq, m):
    # mirror of solve_curvature's matrix assembly (scalar block)
    import scipy.sparse as sp
    from cutflow import curvature as cv
    from cutflow.quadrature import segment_rule
    from cutflow.elements import (p1_basis, p2_basis, p2_element_nodes,
                                  p2_hessian)
    from cutflow.levelset import p2_grad_single
    mesh = mmap.mesh
    iface = reconstruct_interface(mmap.phi1)
    h = mesh.h
    active = mmap.active_elems
    active_mask = np.zeros(mesh.num_triangles, dtype=bool)
    active_mask[active] = True
    elem_nodes_all = p2_element_nodes(mesh)
    nl = mesh.num_vertices + mesh.num_faces
    node_ids = np.unique(elem_nodes_all[active].reshape(-1))
    local = -np.ones(nl, dtype=np.int64)
    local[node_ids] = np.arange(len(node_ids))
    nn = len(node_ids)
    xr, wr = segment_rule(3)
    own = np.repeat(iface.owner, 3)
    p0 = iface.endpoints[:, 0][:, None, :]
    p1e = iface.endpoints[:, 1][:, None, :]
    pts = (p0 + xr[None, :, None] * (p1e - p0)).reshape(-1, 2)
    wts = (iface.lengths[:, None] * wr[None, :]).reshape(-1)
    bary = mesh.barycentric(own, pts)
    D = mmap.jacobian(own, bary)
    detD = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    n1 = np.repeat(iface.normals, 3, axis=0)
    Ninv = np.stack([(D[:, 1, 1] * n1[:, 0] - D[:, 1, 0] * n1[:, 1]) / detD,
                     (-D[:, 0, 1] * n1[:, 0] + D[:, 0, 0] * n1[:, 1]) / detD],
                    axis=1)
    J = np.abs(detD) * np.linalg.norm(Ninv, axis=1)
    nt = Ninv / np.linalg.norm(Ninv, axis=1)[:, None]
    shape = p2_basis(bary)
    gshape = p2_grad_single(bary, mesh.grads[own])
    gmap = np.empty_like(gshape)
    gmap[..., 0] = (D[:, None, 1, 1] * gshape[..., 0] - D[:, None, 1, 0] * gshape[..., 1])
    gmap[..., 1] = (-D[:, None, 0, 1] * gshape[..., 0] + D[:, None, 0, 0] * gshape[..., 1])
    gmap /= detD[:, None, None]
    wJ = wts * J
    en_own = elem_nodes_all[own]
    mass = np.einsum("n,nk,nl->nkl", wJ, shape, shape)
    dnrm = np.einsum("nkd,nd->nk", gmap, nt)
    stab = 1e-2 * np.einsum("n,nk,nl->nkl", wJ, dnrm, dnrm)
    hess = p2_hessian(mesh.grads[own])
    d2 = np.einsum("nd,nkde,ne->nk", nt, hess, nt)
    stab += 1e-2 * h ** 2 * np.einsum("n,nk,nl->nkl", wJ, d2, d2)
    rows = local[en_own]
    from cutflow.curvature import _band_faces, _face_jump_terms
    faces = _band_faces(mesh, active_mask)
    fr, fc, fv = _face_jump_terms(mesh, faces, elem_nodes_all, local, 2, 1e-2, h)
    all_rows = np.concatenate([np.repeat(rows, 6, axis=1).reshape(-1), fr])
    all_cols = np.concatenate([np.tile(rows, (1, 6)).reshape(-1), fc])
    all_vals = np.concatenate([(mass + stab).reshape(-1), fv])
    return sp.coo_matrix((all_vals, (all_rows, all_cols)), shape=(nn, nn)).tocsc()


def test_stabilization_nonnegative_and_vanishing(circle_setup):
    # S_h(w, w) >= 0 already covered by SPD; check it vanishes on a field
    # constant along the normal with continuous gradients: a globally
    # constant field
    fine, phi1, phi2, mmap, H = circle_setup
    A = _curvature_matrix(mmap, phi2, 2)
    # mass matrix alone on a constant field: (c, c) = c^2 |Gamma|; the matrix
    #应用 to constants must reproduce pure mass action (stab of constants = 0)
    iface = reconstruct_interface(phi1)
    ones = np.ones(A.shape[0])
    total = ones @ (A @ ones)
    pts, wts = iface.gauss_points(3)
    # transformed measure of Gamma_{h,q}
    own = np.repeat(iface.owner, 3)
    flat = pts.reshape(-1, 2)
    bary = fine.barycentric(own, flat)
    D = mmap.jacobian(own, bary)
    detD = D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0]
    n1 = np.repeat(iface.normals, 3, axis=0)
    Ninv = np.stack([(D[:, 1, 1] * n1[:, 0] - D[:, 1, 0] * n1[:, 1]) / detD,
                     (-D[:, 0, 1] * n1[:, 0] + D[:, 0, 0] * n1[:, 1]) / detD],
                    axis=1)
    area = (wts.reshape(-1) * np.abs(detD) * np.linalg.norm(Ninv, axis=1)).sum()
    assert total == pytest.approx(area, rel=1e-10)


def test_ellipse_convergence_orders():
    from cutflow.bench import curvature_convergence
    for q in (1, 2):
        res = curvature_convergence(q=q, levels=3)
        orders = res["orders"]
        assert min(orders) >= q - 0.3


def test_curvature_condition_number_under_shifts():
    conds = []
    n = 20
    base = refine_uniform(build_structured_mesh((-1.2, 1.2, -1.2, 1.2), n, n))
    h = 2.4 / n
    for delta in (0.0, h / 8, h / 4, 3 * h / 8):
        fn = lambda p, d=delta: (p[:, 0] - d) ** 2 / 0.64 + p[:, 1] ** 2 - 0.25
        phi2 = init_levelset(("analytic", fn), base, q=2)
        phi1 = p1_interpolate(phi2)
        mmap = build_theta_map(phi1, phi2)
        A = _curvature_matrix(mmap, phi2, 2)
        conds.append(np.linalg.cond(A.toarray()))
    assert max(conds) / min(conds) <= 10.0


def test_surface_tension_zero_sigma(circle_setup):
    fine, phi1, phi2, mmap, H = circle_setup
    iface = reconstruct_interface(phi1)
    loads = surface_tension_term(H, 0.0, iface, 0.5, 0.5)
    assert all(np.abs(l).max() == 0.0 for l in loads)


def test_surface_tension_closed_circle_integral(circle_setup):
    # For v = constant per phase with w1 + w2 = 1, the load reduces to
    # sigma * integral of H over the closed curve, which vanishes
    fine, phi1, phi2, mmap, H = circle_setup
    iface = reconstruct_interface(phi1)
    sigma = 3.7
    loads = surface_tension_term(H, sigma, iface, 0.25, 0.75)
    total = loads[0].sum(axis=0) + loads[1].sum(axis=0)
    scale = sigma * iface.total_length() * 2.0  # sigma * |Gamma| * kappa
    assert np.abs(total).max() <= 1e-6 * scale


def test_surface_tension_stamp_mismatch(circle_setup):
    fine, phi1, phi2, mmap, H = circle_setup
    other = init_levelset(("circle", (0.11, 0.0), 0.4), fine, q=2)
    iface_other = reconstruct_interface(p1_interpolate(other))
    with pytest.raises(CurvatureError):
        surface_tension_term(H, 1.0, iface_other, 0.5, 0.5)


def test_empty_interface_rejected():
    fine = refine_uniform(build_structured_mesh((0, 1, 0, 1), 10, 10))
    phi2 = LevelSetField(fine, 2, np.full(
        fine.num_vertices + fine.num_faces, 1.0))
    phi1 = p1_interpolate(phi2)
    mmap = build_theta_map(phi1, phi2)
    with pytest.raises(CurvatureError):
        solve_curvature(mmap, phi2, m=2)
