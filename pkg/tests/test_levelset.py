import numpy as np
import pytest

from cutflow.elements import p2_node_coords
from cutflow.levelset import (LevelSetField, advect, init_levelset,
                              nodal_gradient_norm, p1_interpolate, reinitialize)
from cutflow.mesh import build_structured_mesh, refine_uniform


@pytest.fixture(scope="module")
def fine():
    return refine_uniform(build_structured_mesh((0, 1, 0, 1), 20, 20))


@pytest.fixture(scope="module")
def fine40():
    return refine_uniform(build_structured_mesh((0, 1, 0, 1), 40, 40))


def zero_beta(p):
    return np.zeros_like(p)


def test_circle_init_sign_convention(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    pts = p2_node_coords(fine)
    i_center = np.argmin(np.abs(pts[:, 0] - 0.5) + np.abs(pts[:, 1] - 0.5))
    assert phi.coeffs[i_center] == pytest.approx(0.25)
    # all four corners lie outside the bubble
    for corner in ((0, 0), (1, 0), (0, 1), (1, 1)):
        j = np.argmin(np.abs(pts[:, 0] - corner[0]) + np.abs(pts[:, 1] - corner[1]))
        assert phi.coeffs[j] < 0


def test_analytic_init_matches_callback(fine):
    fn = lambda p: 0.04 - (p[:, 0] - 0.5) ** 2 - (p[:, 1] - 0.5) ** 2
    phi = init_levelset(("analytic", fn), fine, q=2)
    pts = p2_node_coords(fine)
    assert np.allclose(phi.coeffs, fn(pts))


def test_ellipse_exact_distance(fine):
    phi = init_levelset(("ellipse", (0.5, 0.5), (0.2, 0.3)), fine, q=2)
    pts = p2_node_coords(fine)
    i_center = np.argmin(np.abs(pts[:, 0] - 0.5) + np.abs(pts[:, 1] - 0.5))
    # distance from the center to the ellipse is the short semi-axis
    assert phi.coeffs[i_center] == pytest.approx(0.2, abs=1e-3)
    # points on the long axis at the co-vertex are at distance 0
    j = np.argmin(np.abs(pts[:, 0] - 0.5) + np.abs(pts[:, 1] - 0.8))
    assert abs(phi.coeffs[j]) < 1e-9


def test_boundary_touching_rejected(fine):
    with pytest.raises(ValueError):
        init_levelset(("circle", (0.5, 0.5), 0.6), fine, q=2)


def test_advect_zero_velocity_identity(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    out = advect(phi, zero_beta, zero_beta, 0.05)
    assert np.abs(out.coeffs - phi.coeffs).max() <= 1e-12
    assert out.time == pytest.approx(phi.time + 0.05)


def test_advect_exact_translation(fine):
    pts = p2_node_coords(fine)
    phi = LevelSetField(fine, 2, pts[:, 0] - 0.3)
    beta = lambda p: np.tile([1.0, 0.0], (len(p), 1))
    out = advect(phi, beta, beta, 0.1)
    assert np.abs(out.coeffs - (pts[:, 0] - 0.4)).max() <= 1e-10


def test_streamline_diffusion_parameter_value():
    # direct evaluation of the stated formula at dt=0.1, |beta|=1, h=0.1
    tau = 2.0 / np.sqrt(0.1 ** -2 + 1.0 ** 2 / 0.1 ** 2)
    assert tau == pytest.approx(0.1414213562, abs=1e-9)


def test_advect_requires_quadratic(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=1)
    with pytest.raises(ValueError):
        advect(phi, zero_beta, zero_beta, 0.1)


def test_reinit_identity_when_zero_steps(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    out = reinitialize(phi, 0)
    assert np.array_equal(out.coeffs, phi.coeffs)


def test_reinit_cfl_guard(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    with pytest.raises(ValueError):
        reinitialize(phi, 1, pseudo_dt=fine.h)


def test_reinit_fixed_point_on_distance(fine40):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine40, q=2)
    out = reinitialize(phi, 5)
    band = np.abs(phi.coeffs) < 3 * fine40.h
    assert np.abs(out.coeffs - phi.coeffs)[band].max() <= 1e-3 * fine40.h


def test_reinit_scaled_field_monotone(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    cur = LevelSetField(fine, 2, 2.0 * phi.coeffs)
    band = np.abs(phi.coeffs) < 3 * fine.h
    devs = []
    for _ in range(6):
        devs.append(np.abs(nodal_gradient_norm(cur)[band] - 1.0).mean())
        cur = reinitialize(cur, 1)
    devs.append(np.abs(nodal_gradient_norm(cur)[band] - 1.0).mean())
    assert all(b < a + 1e-12 for a, b in zip(devs, devs[1:]))


def test_reinit_no_sign_change_far_from_interface(fine):
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=2)
    scaled = LevelSetField(fine, 2, 1.7 * phi.coeffs)
    out = reinitialize(scaled, 5)
    far = np.abs(phi.coeffs) > 3 * fine.h
    assert np.all(np.sign(out.coeffs[far]) == np.sign(scaled.coeffs[far]))


def test_reinit_band_gradient_invariant(fine40):
    # band of width 3h needs the relaxation front to sweep it: a few calls
    # of the default 5 steps, as the marching loop does
    phi = init_levelset(("circle", (0.5, 0.5), 0.25), fine40, q=2)
    out = LevelSetField(fine40, 2, phi.coeffs * 1.2)
    for _ in range(6):
        out = reinitialize(out, 5)
    band = np.abs(phi.coeffs) < 3 * fine40.h
    assert np.abs(nodal_gradient_norm(out)[band] - 1.0).max() <= 0.1


def test_reinit_zero_set_displacement(fine40):
    from cutflow.cutgeom import reconstruct_interface
    phi = init_levelset(("circle", (0.497, 0.503), 0.25), fine40, q=2)
    before = reconstruct_interface(p1_interpolate(phi))
    out = reinitialize(phi, 5)
    after = reconstruct_interface(p1_interpolate(out))
    # both polylines approximate the same circle; compare radial positions
    r_before = np.linalg.norm(before.midpoints() - [0.497, 0.503], axis=1)
    r_after = np.linalg.norm(after.midpoints() - [0.497, 0.503], axis=1)
    assert np.abs(r_after.mean() - r_before.mean()) <= 0.1 * fine40.h


def test_p1_interpolate_idempotent(fine):
    phi1 = init_levelset(("circle", (0.5, 0.5), 0.25), fine, q=1)
    out = p1_interpolate(phi1)
    assert out.q == 1
    assert np.array_equal(out.coeffs, phi1.coeffs)


def test_p1_interpolate_drops_midpoints(fine):
    phi = init_levelset(("ellipse", (0.5, 0.5), (0.2, 0.3)), fine, q=2)
    out = p1_interpolate(phi)
    assert out.q == 1
    assert np.array_equal(out.coeffs, phi.coeffs[: fine.num_vertices])


def test_p1_of_linear_field_equals_p2(fine):
    pts = p2_node_coords(fine)
    phi = LevelSetField(fine, 2, 0.3 * pts[:, 0] - 0.7 * pts[:, 1] + 0.1)
    p1 = p1_interpolate(phi)
    probe = np.random.default_rng(3).random((50, 2))
    # locate points by brute force in the structured grid
    tri = _locate(fine, probe)
    bary = fine.barycentric(tri, probe)
    assert np.allclose(p1.eval_in_elements(tri, bary),
                       phi.eval_in_elements(tri, bary), atol=1e-13)


def test_p1_zero_set_second_order(fine):
    # Hausdorff-type distance of the P1 zero set to a smooth ellipse: O(h^2)
    from cutflow.cutgeom import reconstruct_interface
    errs = []
    hs = []
    for n in (10, 20, 40):
        f = refine_uniform(build_structured_mesh((-1.2, 1.2, -1.2, 1.2), n, n))
        phi = init_levelset(("analytic",
                             lambda p: p[:, 0] ** 2 / 0.64 + p[:, 1] ** 2 - 0.25),
                            f, q=2)
        iface = reconstruct_interface(p1_interpolate(phi))
        pts = iface.endpoints.reshape(-1, 2)
        g = pts[:, 0] ** 2 / 0.64 + pts[:, 1] ** 2 - 0.25
        grad = np.stack([2 * pts[:, 0] / 0.64, 2 * pts[:, 1]], axis=1)
        errs.append(np.max(np.abs(g) / np.linalg.norm(grad, axis=1)))
        hs.append(f.h)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order >= 1.7


def _locate(mesh, points):
    # structured diagonal-split lookup
    x0, x1, y0, y1 = mesh.domain
    nx = int(round((x1 - x0) / mesh.dx))
    i = np.clip(((points[:, 0] - x0) / mesh.dx).astype(int), 0, nx - 1)
    ny = int(round((y1 - y0) / mesh.dy))
    j = np.clip(((points[:, 1] - y0) / mesh.dy).astype(int), 0, ny - 1)
    fx = (points[:, 0] - x0) / mesh.dx - i
    fy = (points[:, 1] - y0) / mesh.dy - j
    lower = fy <= fx
    return 2 * (j * nx + i) + np.where(lower, 0, 1)
