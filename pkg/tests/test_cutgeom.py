import numpy as np
import pytest

from cutflow.cutgeom import (GeomAtTime, GeometryError, classify_elements,
                             cut_quadrature, build_slab_geometry,
                             reconstruct_interface)
from cutflow.levelset import LevelSetField, init_levelset, p1_interpolate
from cutflow.mesh import build_structured_mesh, refine_uniform
from cutflow.quadrature import triangle_rule


@pytest.fixture(scope="module")
def meshes():
    coarse = build_structured_mesh((0, 1, 0, 1), 20, 20)
    return coarse, refine_uniform(coarse)


@pytest.fixture(scope="module")
def circle_fields(meshes):
    _, fine = meshes
    # generic center: no lattice point lies exactly on the circle
    phi2 = init_levelset(("circle", (0.503, 0.497), 0.25), fine, q=2)
    return phi2, p1_interpolate(phi2)


def test_classification_signs(meshes):
    _, fine = meshes
    phi = LevelSetField(fine, 1, np.full(fine.num_vertices, 2.0))
    assert np.all(classify_elements(phi) == 1)
    phi = LevelSetField(fine, 1, np.full(fine.num_vertices, -2.0))
    assert np.all(classify_elements(phi) == -1)


def test_classification_mixed_is_cut(meshes):
    _, fine = meshes
    vals = np.where(fine.vertices[:, 0] < 0.52, -0.1, 0.2)
    phi = LevelSetField(fine, 1, vals)
    labels = classify_elements(phi)
    assert (labels == 0).any()
    tv = vals[fine.triangles]
    expect_cut = ~(np.all(tv > 0, axis=1) | np.all(tv < 0, axis=1))
    assert np.array_equal(labels == 0, expect_cut)


def test_zero_vertex_perturbed_positive(meshes):
    _, fine = meshes
    vals = fine.vertices[:, 0] - fine.vertices[0 , 0] - 0.5  # exact zeros on a lattice line
    vals = fine.vertices[:, 0] - 0.5
    phi = LevelSetField(fine, 1, vals)
    labels = classify_elements(phi)
    # elements whose only nonnegative vertex sits exactly on the line are cut,
    # with the zero treated as positive
    tv = vals[fine.triangles]
    has_zero = np.any(np.abs(tv) < 1e-14 * fine.h, axis=1)
    has_neg = np.any(tv < -1e-14 * fine.h, axis=1)
    assert np.all(labels[has_zero & has_neg] == 0)
    # segments of the перturbed field stay on its zero set
    iface = reconstruct_interface(phi)
    ep = iface.endpoints.reshape(-1, 2)
    assert np.abs(ep[:, 0] - 0.5).max() <= 1e-10


def test_planar_interface_length(meshes):
    _, fine = meshes
    phi = LevelSetField(fine, 1, fine.vertices[:, 0] - 0.5)
    iface = reconstruct_interface(phi)
    assert iface.total_length() == pytest.approx(1.0, abs=1e-12)


def test_no_sign_change_empty_interface(meshes):
    _, fine = meshes
    phi = LevelSetField(fine, 1, np.full(fine.num_vertices, 0.3))
    iface = reconstruct_interface(phi)
    assert iface.num_segments == 0


def test_circle_perimeter_second_order():
    errs, hs = [], []
    for n in (10, 20, 40):
        fine = refine_uniform(build_structured_mesh((0, 1, 0, 1), n, n))
        phi1 = p1_interpolate(init_levelset(("circle", (0.503, 0.497), 0.25),
                                            fine, q=2))
        iface = reconstruct_interface(phi1)
        errs.append(abs(iface.total_length() - 2 * np.pi * 0.25))
        hs.append(fine.h)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 1.8


def test_interface_normals(circle_fields):
    _, phi1 = circle_fields
    iface = reconstruct_interface(phi1)
    assert np.allclose(np.linalg.norm(iface.normals, axis=1), 1.0)
    bary = np.full((iface.num_segments, 3), 1 / 3)
    dots = np.einsum("nd,nd->n", phi1.grad_in_elements(iface.owner, bary),
                     iface.normals)
    assert np.all(dots > 0)
    # normals point toward the enclosed (positive) region: outward from center
    mids = iface.midpoints()
    toward_center = np.einsum("nd,nd->n", iface.normals,
                              np.array([0.503, 0.497]) - mids)
    assert np.all(toward_center > 0)


def test_closed_polyline_valence(circle_fields):
    _, phi1 = circle_fields
    iface = reconstruct_interface(phi1)
    ep = np.round(iface.endpoints.reshape(-1, 2) / (1e-9 * phi1.mesh.h))
    _, counts = np.unique(ep, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_cut_partition_exact(circle_fields):
    _, phi1 = circle_fields
    cq = cut_quadrature(phi1)
    full = phi1.mesh.areas[cq.cut_elems]
    assert np.abs(cq.areas_cut.sum(axis=1) - full).max() <= 1e-13 * full.max()
    for phase in (0, 1):
        _, wts = cq.points_weights(phase)
        assert np.all(wts > 0)


def test_bubble_area_accuracy():
    fine = refine_uniform(build_structured_mesh((0, 1, 0, 2), 40, 80))
    coarse = build_structured_mesh((0, 1, 0, 2), 40, 80)
    phi2 = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    geom = GeomAtTime(p1_interpolate(phi2), phi2).attach_coarse(coarse)
    area = geom.phase_area(1)
    assert abs(area - np.pi * 0.25 ** 2) / (np.pi * 0.25 ** 2) < 0.005
    total = geom.phase_area(0) + geom.phase_area(1)
    assert total == pytest.approx(2.0, rel=1e-12)


def test_uncut_quadrature_matches_standard(circle_fields, meshes):
    _, fine = meshes
    bary, w = triangle_rule(2)
    tri = 7
    corners = fine.vertices[fine.triangles[tri]]
    pts = np.einsum("qk,kd->qd", bary, corners)
    wts = fine.areas[tri] * w
    # integrate x*y over the element both ways
    exact = (wts * pts[:, 0] * pts[:, 1]).sum()
    from cutflow.quadrature import map_to_triangles
    pts2 = map_to_triangles(corners[None], bary)[0]
    assert np.allclose(pts2, pts)
    assert exact == pytest.approx((wts * pts2[:, 0] * pts2[:, 1]).sum(), rel=1e-14)


def test_alpha_gamma_measures(circle_fields):
    _, phi1 = circle_fields
    cq = cut_quadrature(phi1)
    assert np.all(cq.alpha > 0)
    assert np.all(cq.gamma > 0)
    # alpha_K * h_K^2 recovers the areas
    assert np.allclose(cq.alpha.sum(axis=1) * cq.h_K ** 2,
                       phi1.mesh.areas[cq.cut_elems])


def test_slab_stationary_degenerate(meshes, circle_fields):
    coarse, fine = meshes
    phi2, _ = circle_fields
    phis = []
    for k, t in enumerate((0.0, 0.1)):
        phis.append(LevelSetField(fine, 2, phi2.coeffs.copy(), t))
    slab = build_slab_geometry([p1_interpolate(p) for p in phis], fine, coarse)
    single = build_slab_geometry([p1_interpolate(phis[0])], fine, coarse)
    for i in (0, 1):
        assert np.array_equal(slab.active_fine[i], single.active_fine[i])
        assert np.array_equal(slab.ghost_faces_fine[i], single.ghost_faces_fine[i])


def test_slab_swept_band(meshes):
    coarse, fine = meshes
    h = 1 / 20
    # circle translating by 2h over the slab: elements swept from one side to
    # the other without being cut at either collocation time are still
    # collected via the side-change rule
    phis = []
    for t, yc in ((0.0, 0.4), (1.0, 0.4 + 2 * h)):
        f = init_levelset(("circle", (0.503, yc), 0.25), fine, q=2)
        phis.append(LevelSetField(fine, 1, f.coeffs[: fine.num_vertices], t))
    slab = build_slab_geometry(phis, fine, coarse)
    labels = np.stack([classify_elements(p) for p in phis])
    crossed = ((labels[0] == 1) & (labels[1] == -1)) | \
              ((labels[0] == -1) & (labels[1] == 1))
    assert crossed.any()
    assert np.all(slab.active_fine[0][crossed])
    assert np.all(slab.active_fine[1][crossed])
    assert np.all(slab.cut_any_fine[crossed])


def test_active_sets_monotone_in_time_points(meshes, circle_fields):
    coarse, fine = meshes
    phi2, _ = circle_fields
    shifted = LevelSetField(fine, 2, init_levelset(
        ("circle", (0.503, 0.497 + 0.03), 0.25), fine, q=2).coeffs, 0.5)
    base = LevelSetField(fine, 2, phi2.coeffs.copy(), 0.0)
    end = LevelSetField(fine, 2, shifted.coeffs.copy(), 1.0)
    two = build_slab_geometry([p1_interpolate(base), p1_interpolate(end)],
                              fine, coarse)
    mid = LevelSetField(fine, 2, init_levelset(
        ("circle", (0.503, 0.497 + 0.015), 0.25), fine, q=2).coeffs, 0.5)
    three = build_slab_geometry(
        [p1_interpolate(base), p1_interpolate(mid), p1_interpolate(end)],
        fine, coarse)
    for i in (0, 1):
        assert np.all(three.active_fine[i][two.active_fine[i]])


def test_ghost_faces_interior(meshes, circle_fields):
    coarse, fine = meshes
    phi2, _ = circle_fields
    slab = build_slab_geometry([p1_interpolate(phi2)], fine, coarse)
    for mesh, faces_sets, active in ((fine, slab.ghost_faces_fine, slab.active_fine),
                                     (coarse, slab.ghost_faces_coarse,
                                      slab.active_coarse)):
        for i in (0, 1):
            ft = mesh.face_tris[faces_sets[i]]
            assert np.all(ft[:, 1] >= 0)
            assert np.all(active[i][ft[:, 0]])
            assert np.all(active[i][ft[:, 1]])


def test_boundary_touch_rejected_at_slab_level(meshes):
    coarse, fine = meshes
    phi = LevelSetField(fine, 1, fine.vertices[:, 0] - 0.5)
    with pytest.raises(GeometryError):
        build_slab_geometry([phi], fine, coarse)


def test_area_conservation_every_snapshot(meshes, circle_fields):
    coarse, fine = meshes
    phi2, _ = circle_fields
    geom = GeomAtTime(p1_interpolate(phi2), phi2).attach_coarse(coarse)
    assert geom.phase_area(0) + geom.phase_area(1) == pytest.approx(1.0, rel=1e-12)
