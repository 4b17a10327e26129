"""Triangle meshes with labeled boundary facets.

A :class:`TriMesh` is the explicit geometric substrate for all finite element
work: vertices, CCW triangles, and boundary facets each carrying one of the
labels Dirichlet / Neumann / Contact / Free.  Structured rectangle meshes are
generated with :func:`rect_mesh`; cut meshes produced from a level set reuse
the same class (see :mod:`contactopt.levelset`).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DIRICHLET", "NEUMANN", "CONTACT", "FREE", "LABEL_NAMES",
    "TriMesh", "rect_mesh", "boundary_facets_of", "read_mesh", "write_mesh",
]

DIRICHLET, NEUMANN, CONTACT, FREE = 1, 2, 3, 4
LABEL_NAMES = {DIRICHLET: "dirichlet", NEUMANN: "neumann", CONTACT: "contact", FREE: "free"}
_NAME_TO_LABEL = {v: k for k, v in LABEL_NAMES.items()}


class TriMesh:
    """Conforming triangulation with labeled boundary facets.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, each CCW (positive signed area)
    facets : (nf, 2) int array of boundary edges
    facet_labels : (nf,) int array with values in {DIRICHLET, NEUMANN,
        CONTACT, FREE}
    """

    def __init__(self, vertices, triangles, facets, facet_labels):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.facets = np.asarray(facets, dtype=np.int64).reshape(-1, 2)
        self.facet_labels = np.asarray(facet_labels, dtype=np.int64).reshape(-1)
        if len(self.facets) != len(self.facet_labels):
            raise ValueError("facet/label count mismatch")
        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            bad = int(np.argmin(areas))
            raise ValueError(f"triangle {bad} has nonpositive area {areas[bad]:g}")

    # -- geometry ----------------------------------------------------------

    def signed_areas(self):
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @property
    def area(self) -> float:
        return float(self.signed_areas().sum())

    @property
    def h_mesh(self) -> float:
        """Characteristic length: mean boundary-facet-free edge scale."""
        p = self.vertices[self.triangles]
        e = np.concatenate([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        return float(np.mean(np.linalg.norm(e, axis=1)))

    def facet_normals(self):
        """Outward unit normals of the boundary facets.

        Orientation is fixed against the owning triangle: the normal points
        from the facet midpoint away from the triangle centroid.
        """
        owner = self.facet_owners()
        a = self.vertices[self.facets[:, 0]]
        b = self.vertices[self.facets[:, 1]]
        t = b - a
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        mid = 0.5 * (a + b)
        centroid = self.vertices[self.triangles[owner]].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, mid - centroid) < 0.0
        n[flip] *= -1.0
        return n

    def facet_lengths(self):
        a = self.vertices[self.facets[:, 0]]
        b = self.vertices[self.facets[:, 1]]
        return np.linalg.norm(b - a, axis=1)

    def facet_owners(self):
        """Index of the unique triangle owning each boundary facet."""
        if not hasattr(self, "_owners"):
            edge_map = {}
            for ti, tri in enumerate(self.triangles):
                for k in range(3):
                    key = (min(tri[k], tri[(k + 1) % 3]), max(tri[k], tri[(k + 1) % 3]))
                    edge_map.setdefault(key, ti)
            owners = np.empty(len(self.facets), dtype=np.int64)
            for fi, (a, b) in enumerate(self.facets):
                owners[fi] = edge_map[(min(a, b), max(a, b))]
            self._owners = owners
        return self._owners

    def facets_with_label(self, label):
        return np.nonzero(self.facet_labels == label)[0]


def boundary_facets_of(triangles):
    """Edges belonging to exactly one triangle, in deterministic order."""
    count = {}
    first = {}
    order = []
    for ti, tri in enumerate(np.asarray(triangles)):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (min(a, b), max(a, b))
            if key not in count:
                count[key] = 0
                first[key] = (a, b)
                order.append(key)
            count[key] += 1
    return np.array([first[k] for k in order if count[k] == 1], dtype=np.int64).reshape(-1, 2)


def rect_mesh(nx, ny, bounds=(0.0, 0.0, 1.0, 1.0), labeler=None):
    """Structured triangulation of the rectangle ``bounds``.

    ``nx`` and ``ny`` count cells; each cell is split along the same diagonal.
    ``labeler(midpoint, normal) -> label`` assigns boundary labels (default:
    everything FREE).
    """
    x0, y0, x1, y1 = bounds
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    triangles = np.array(tris, dtype=np.int64)
    facets = boundary_facets_of(triangles)
    mesh = TriMesh(vertices, triangles, facets, np.full(len(facets), FREE))
    if labeler is not None:
        normals = mesh.facet_normals()
        mids = 0.5 * (mesh.vertices[facets[:, 0]] + mesh.vertices[facets[:, 1]])
        mesh.facet_labels = np.array(
            [labeler(m, n) for m, n in zip(mids, normals)], dtype=np.int64)
    return mesh


def write_mesh(path, mesh: TriMesh):
    """Plain-text mesh format: counts header, vertices, triangles, facets."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(mesh.vertices)} {len(mesh.triangles)} {len(mesh.facets)}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        for (a, b), lab in zip(mesh.facets, mesh.facet_labels):
            fh.write(f"{a} {b} {LABEL_NAMES[int(lab)]}\n")


def read_mesh(path) -> TriMesh:
    """Read the plain-text mesh format written by :func:`write_mesh`."""
    with open(path, "r", encoding="utf-8") as fh:
        nv, nt, nf = (int(t) for t in fh.readline().split())
        vertices = np.array([[float(t) for t in fh.readline().split()] for _ in range(nv)])
        triangles = np.array([[int(t) for t in fh.readline().split()] for _ in range(nt)],
                             dtype=np.int64)
        facets = np.empty((nf, 2), dtype=np.int64)
        labels = np.empty(nf, dtype=np.int64)
        for k in range(nf):
            a, b, name = fh.readline().split()
            facets[k] = (int(a), int(b))
            labels[k] = _NAME_TO_LABEL[name]
    return TriMesh(vertices, triangles, facets, labels)
