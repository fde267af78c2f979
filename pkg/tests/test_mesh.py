import numpy as np
import pytest

from cutflow.mesh import build_structured_mesh, refine_uniform


def test_minimal_split_counts():
    m = build_structured_mesh((0, 1, 0, 1), 1, 1)
    assert m.num_triangles == 2
    assert m.num_vertices == 4
    assert m.num_faces == 5


def test_benchmark_mesh_cell_size():
    m = build_structured_mesh((0, 1, 0, 2), 40, 80)
    assert m.dx == pytest.approx(1 / 40)
    assert m.dy == pytest.approx(1 / 40)


@pytest.mark.parametrize("nx,ny", [(1, 1), (3, 5), (40, 80)])
def test_euler_characteristic(nx, ny):
    m = build_structured_mesh((0, 1, 0, 2), nx, ny)
    assert m.num_vertices - m.num_faces + m.num_triangles == 1


def test_area_sum_matches_domain():
    m = build_structured_mesh((-1.2, 1.2, 0.3, 2.7), 7, 11)
    assert m.areas.sum() == pytest.approx(2.4 * 2.4, rel=1e-12)


def test_degenerate_domain_rejected():
    with pytest.raises(ValueError):
        build_structured_mesh((0, 0, 0, 1), 4, 4)
    with pytest.raises(ValueError):
        build_structured_mesh((0, 1, 0, 1), 0, 4)


def test_quasi_uniformity():
    m = build_structured_mesh((0, 1, 0, 2), 13, 7)
    assert m.tri_diams.max() / m.tri_diams.min() <= 4.0


def test_face_adjacency():
    m = build_structured_mesh((0, 1, 0, 1), 4, 4)
    interior = m.face_tris[:, 1] >= 0
    assert np.all(m.face_tris[:, 0] >= 0)
    # orientation: stored normals are unit and stable
    assert np.allclose(np.linalg.norm(m.face_normals, axis=1), 1.0)
    # internal normals point from lower to higher triangle index
    cent = m.vertices[m.triangles].mean(axis=1)
    d = cent[m.face_tris[interior, 1]] - cent[m.face_tris[interior, 0]]
    assert np.all(np.einsum("ij,ij->i", d, m.face_normals[interior]) > 0)


def test_boundary_normals_outward():
    m = build_structured_mesh((0, 2, -1, 1), 5, 5)
    bf = m.boundary_faces
    mid = 0.5 * (m.vertices[m.faces[bf, 0]] + m.vertices[m.faces[bf, 1]])
    out = mid + 1e-6 * m.face_normals[bf]
    assert np.all((out[:, 0] < 0) | (out[:, 0] > 2) | (out[:, 1] < -1) | (out[:, 1] > 1))


def test_refine_counts_and_h():
    m = build_structured_mesh((0, 1, 0, 1), 1, 1)
    f = refine_uniform(m)
    assert f.num_triangles == 8
    assert f.num_vertices == 9
    assert f.h == pytest.approx(m.h / 2)
    assert f.areas.sum() == pytest.approx(m.areas.sum(), rel=1e-14)


def test_refine_parent_tiling():
    m = build_structured_mesh((0, 1.5, 0, 1), 3, 2)
    f = refine_uniform(m)
    assert f.parent_map.shape == (4 * m.num_triangles,)
    child_area = np.zeros(m.num_triangles)
    np.add.at(child_area, f.parent_map, f.areas)
    assert np.allclose(child_area, m.areas, rtol=1e-14)
    # parent vertices keep their indices
    assert np.allclose(f.vertices[: m.num_vertices], m.vertices)


def test_children_similar_to_parent():
    m = build_structured_mesh((0, 1, 0, 1), 2, 2)
    f = refine_uniform(m)
    for c in range(4):
        child = f.tri_diams[c::4]
        assert np.allclose(child, m.tri_diams / 2)


def test_mesh_immutable():
    m = build_structured_mesh((0, 1, 0, 1), 2, 2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 42.0
