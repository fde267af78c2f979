"""Fixed background triangulations of a rectangle.

The solver works on a pair of nested meshes: a coarse triangulation of the
rectangular domain (carrying the pressure space) and its uniform refinement
(carrying the velocity and level-set spaces).  Both are built once and never
change; interfaces are free to cut through them arbitrarily.
"""

from __future__ import annotations

import numpy as np

# boundary side codes
SIDE_LEFT, SIDE_RIGHT, SIDE_BOTTOM, SIDE_TOP = 0, 1, 2, 3


class BackgroundMesh:
    """Immutable triangle mesh with face connectivity.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counter-clockwise
    faces : (nf, 2) int array of vertex pairs (lo < hi)
    face_tris : (nf, 2) int array of adjacent triangles, -1 for boundary
    face_normals : (nf, 2) unit normals; internal faces point from the
        lower-indexed to the higher-indexed adjacent triangle, boundary
        faces point out of the domain
    tri_faces : (nt, 3) face index opposite each local vertex
    h : nominal mesh size (max triangle diameter)
    parent_map : (nt,) int array into the parent mesh, or None
    """

    def __init__(self, vertices, triangles, domain, dx, dy, parent_map=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.domain = tuple(domain)  # (x0, x1, y0, y1)
        self.dx = float(dx)
        self.dy = float(dy)
        self.parent_map = None if parent_map is None else np.asarray(parent_map, dtype=np.int64)
        self._build_geometry()
        self._build_faces()
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)

    # -- geometry tables ---------------------------------------------------

    def _build_geometry(self):
        v = self.vertices[self.triangles]  # (nt, 3, 2)
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0.0):
            raise ValueError("mesh contains a non-CCW or degenerate triangle")
        self.areas = 0.5 * det
        # gradients of the P1 barycentric functions, (nt, 3, 2)
        g = np.empty((len(det), 3, 2))
        g[:, 1, 0] = e2[:, 1] / det
        g[:, 1, 1] = -e2[:, 0] / det
        g[:, 2, 0] = -e1[:, 1] / det
        g[:, 2, 1] = e1[:, 0] / det
        g[:, 0] = -g[:, 1] - g[:, 2]
        self.grads = g
        edge_len = np.stack([
            np.linalg.norm(v[:, 2] - v[:, 1], axis=1),
            np.linalg.norm(v[:, 0] - v[:, 2], axis=1),
            np.linalg.norm(v[:, 1] - v[:, 0], axis=1),
        ], axis=1)
        self.tri_diams = edge_len.max(axis=1)
        self.h = float(self.tri_diams.max())

    def _build_faces(self):
        tris = self.triangles
        nt = len(tris)
        # local face k is opposite local vertex k
        pairs = np.concatenate([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]])
        pairs = np.sort(pairs, axis=1)
        owner = np.tile(np.arange(nt), 3)
        key = pairs[:, 0] * (self.vertices.shape[0] + 1) + pairs[:, 1]
        order = np.argsort(key, kind="stable")
        key_s, pairs_s, owner_s = key[order], pairs[order], owner[order]
        uniq, start = np.unique(key_s, return_index=True)
        nf = len(uniq)
        faces = pairs_s[start]
        face_tris = np.full((nf, 2), -1, dtype=np.int64)
        face_tris[:, 0] = owner_s[start]
        second = np.full(nf, -1, dtype=np.int64)
        nxt = np.minimum(start + 1, len(key_s) - 1)
        shared = (start + 1 < len(key_s)) & (key_s[nxt] == uniq)
        second[shared] = owner_s[nxt[shared]]
        face_tris[:, 1] = second
        # keep the lower triangle index in column 0
        swap = (face_tris[:, 1] >= 0) & (face_tris[:, 1] < face_tris[:, 0])
        face_tris[swap] = face_tris[swap][:, ::-1]
        self.faces = faces
        self.face_tris = face_tris

        # inverse map: triangle -> its three faces (local face k opposite vertex k)
        face_of_key = dict(zip(uniq.tolist(), range(nf)))
        tri_faces = np.empty((nt, 3), dtype=np.int64)
        for k in range(3):
            loc = np.sort(tris[:, [(k + 1) % 3, (k + 2) % 3]], axis=1)
            kk = loc[:, 0] * (self.vertices.shape[0] + 1) + loc[:, 1]
            tri_faces[:, k] = [face_of_key[x] for x in kk.tolist()]
        self.tri_faces = tri_faces

        p0 = self.vertices[faces[:, 0]]
        p1 = self.vertices[faces[:, 1]]
        t = p1 - p0
        self.face_lengths = np.linalg.norm(t, axis=1)
        n = np.stack([t[:, 1], -t[:, 0]], axis=1) / self.face_lengths[:, None]
        # orient: lower-indexed triangle -> higher-indexed; boundary -> outward
        centroids = self.vertices[self.triangles].mean(axis=1)
        ref = centroids[face_tris[:, 0]]
        mid = 0.5 * (p0 + p1)
        flip = np.einsum("ij,ij->i", n, mid - ref) < 0.0
        n[flip] *= -1.0
        self.face_normals = n
        self.interior_faces = np.where(face_tris[:, 1] >= 0)[0]
        self.boundary_faces = np.where(face_tris[:, 1] < 0)[0]
        self._label_boundary_sides()

    def _label_boundary_sides(self):
        x0, x1, y0, y1 = self.domain
        tol = 1e-12 * max(x1 - x0, y1 - y0)
        side = np.full(len(self.faces), -1, dtype=np.int64)
        bf = self.boundary_faces
        mid = 0.5 * (self.vertices[self.faces[bf, 0]] + self.vertices[self.faces[bf, 1]])
        side[bf[np.abs(mid[:, 0] - x0) < tol]] = SIDE_LEFT
        side[bf[np.abs(mid[:, 0] - x1) < tol]] = SIDE_RIGHT
        side[bf[np.abs(mid[:, 1] - y0) < tol]] = SIDE_BOTTOM
        side[bf[np.abs(mid[:, 1] - y1) < tol]] = SIDE_TOP
        self.face_sides = side

    # -- queries -------------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def barycentric(self, tri_ids, points):
        """Barycentric coordinates of `points` (n, 2) in triangles `tri_ids`."""
        v0 = self.vertices[self.triangles[tri_ids, 0]]
        g = self.grads[tri_ids]  # (n, 3, 2)
        lam = np.empty((len(points), 3))
        d = points - v0
        lam[:, 1] = np.einsum("ij,ij->i", g[:, 1], d)
        lam[:, 2] = np.einsum("ij,ij->i", g[:, 2], d)
        lam[:, 0] = 1.0 - lam[:, 1] - lam[:, 2]
        return lam


def build_structured_mesh(domain, nx, ny):
    """Triangulate the rectangle `domain` = (x0, x1, y0, y1) with an nx-by-ny
    grid of cells, each split along its lower-left to upper-right diagonal.

    Deterministic vertex ordering (row major), CCW triangles.
    """
    x0, x1, y0, y1 = map(float, domain)
    if not (nx >= 1 and ny >= 1):
        raise ValueError("nx and ny must be at least 1")
    if not (x1 > x0 and y1 > y0):
        raise ValueError("domain must have positive width and height")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    return BackgroundMesh(vertices, triangles, (x0, x1, y0, y1), dx, dy)


def refine_uniform(mesh):
    """Split each triangle into 4 similar children through the edge midpoints.

    Parent vertices keep their indices; midpoint of face f gets index
    nv_parent + f.  The parent map lists each coarse triangle once per child.
    """
    nv = mesh.num_vertices
    midpoints = 0.5 * (mesh.vertices[mesh.faces[:, 0]] + mesh.vertices[mesh.faces[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])
    t = mesh.triangles
    m = nv + mesh.tri_faces  # (nt, 3): midpoint opposite local vertex k
    children = np.empty((4 * len(t), 3), dtype=np.int64)
    children[0::4] = np.stack([t[:, 0], m[:, 2], m[:, 1]], axis=1)
    children[1::4] = np.stack([t[:, 1], m[:, 0], m[:, 2]], axis=1)
    children[2::4] = np.stack([t[:, 2], m[:, 1], m[:, 0]], axis=1)
    children[3::4] = m
    parent_map = np.repeat(np.arange(len(t)), 4)
    return BackgroundMesh(vertices, children, mesh.domain, mesh.dx / 2, mesh.dy / 2,
                          parent_map=parent_map)
