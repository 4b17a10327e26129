"""Level-set shape representation on a Cartesian grid.

The design is the negative region of a nodal scalar field phi; the boundary
is the zero level set.  This module provides signed-distance initialization,
Hamilton-Jacobi advection by a scalar normal speed (second-order ENO in
space, two-stage TVD time stepping, Neumann conditions on the grid edge),
PDE reinitialization with a subcell interface anchor, curvature evaluation
and the cutting step that intersects a background triangulation with
{phi < 0} to produce a conforming, labeled mesh of the current shape.
"""

from __future__ import annotations

import numpy as np

from .mesh import CONTACT, DIRICHLET, FREE, NEUMANN, TriMesh, boundary_facets_of

__all__ = [
    "Grid", "LevelSetField", "init_signed_distance", "advect", "reinitialize",
    "curvature", "cut_mesh", "CutMesh", "BoundaryConfig", "InadmissibleShapeError",
]


class DegenerateShapeError(ValueError):
    pass


class InadmissibleShapeError(RuntimeError):
    pass


class Grid:
    """Uniform node grid covering the box ``bounds``; nx, ny count cells."""

    def __init__(self, nx: int, ny: int, bounds=(0.0, 0.0, 2.0, 1.0)):
        self.nx, self.ny = int(nx), int(ny)
        self.x0, self.y0, self.x1, self.y1 = (float(b) for b in bounds)
        self.dx = (self.x1 - self.x0) / self.nx
        self.dy = (self.y1 - self.y0) / self.ny
        self.xs = np.linspace(self.x0, self.x1, self.nx + 1)
        self.ys = np.linspace(self.y0, self.y1, self.ny + 1)

    @property
    def spacing(self) -> float:
        return min(self.dx, self.dy)

    @property
    def shape(self):
        return (self.nx + 1, self.ny + 1)

    def nodes(self):
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def cell_of(self, pts):
        pts = np.atleast_2d(pts)
        i = np.clip(((pts[:, 0] - self.x0) / self.dx).astype(int), 0, self.nx - 1)
        j = np.clip(((pts[:, 1] - self.y0) / self.dy).astype(int), 0, self.ny - 1)
        s = (pts[:, 0] - self.x0) / self.dx - i
        t = (pts[:, 1] - self.y0) / self.dy - j
        return i, j, np.clip(s, 0.0, 1.0), np.clip(t, 0.0, 1.0)

    def interp(self, values, pts):
        """Bilinear interpolation of a nodal array at arbitrary points."""
        values = np.asarray(values)
        i, j, s, t = self.cell_of(pts)
        return ((1 - s) * (1 - t) * values[i, j] + s * (1 - t) * values[i + 1, j]
                + (1 - s) * t * values[i, j + 1] + s * t * values[i + 1, j + 1])

    def interp_grad(self, values, pts):
        """Gradient of the bilinear interpolant (piecewise per cell)."""
        values = np.asarray(values)
        i, j, s, t = self.cell_of(pts)
        gx = ((1 - t) * (values[i + 1, j] - values[i, j])
              + t * (values[i + 1, j + 1] - values[i, j + 1])) / self.dx
        gy = ((1 - s) * (values[i, j + 1] - values[i, j])
              + s * (values[i + 1, j + 1] - values[i + 1, j])) / self.dy
        return np.stack([gx, gy], axis=-1)


class LevelSetField:
    """Nodal level-set values on a :class:`Grid`; the shape is {phi < 0}."""

    def __init__(self, grid: Grid, phi: np.ndarray, stamp: int = 0):
        self.grid = grid
        self.phi = np.asarray(phi, dtype=float).reshape(grid.shape)
        self.stamp = stamp
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("level set contains non-finite values")

    def copy(self):
        return LevelSetField(self.grid, self.phi.copy(), self.stamp)

    def gradient_nodes(self):
        """Centered-difference nodal gradient (one-sided at the grid edge)."""
        gx, gy = np.gradient(self.phi, self.grid.dx, self.grid.dy, edge_order=1)
        return gx, gy

    def band_gradient_norms(self, width_cells: float = 5.0):
        gx, gy = self.gradient_nodes()
        norm = np.hypot(gx, gy)
        band = np.abs(self.phi) <= width_cells * self.grid.spacing
        return norm[band]

    def normal_field(self, floor: float = 1e-8):
        """Nodal outward-normal extension grad(phi)/|grad(phi)|.

        Nodes with |grad phi| below ``floor`` get a zero normal; callers that
        need the normal near the interface should check
        :meth:`interface_gradient_ok` first.
        """
        gx, gy = self.gradient_nodes()
        norm = np.hypot(gx, gy)
        safe = np.where(norm < floor, 1.0, norm)
        nx = np.where(norm < floor, 0.0, gx / safe)
        ny = np.where(norm < floor, 0.0, gy / safe)
        return nx, ny

    def interface_gradient_ok(self, floor: float = 1e-8, band_cells: float = 2.0):
        """True when |grad phi| stays above ``floor`` near the zero level."""
        gx, gy = self.gradient_nodes()
        norm = np.hypot(gx, gy)
        band = np.abs(self.phi) <= band_cells * self.grid.spacing
        return bool(np.all(norm[band] >= floor))


# -- initialization -----------------------------------------------------------

def init_signed_distance(shape, grid: Grid, reinit_iters: int = 20) -> LevelSetField:
    """Signed distance field for a shape description.

    ``shape`` is either a callable ``pts -> phi`` or a dict:

    * ``{"kind": "full"}`` - the whole box (negative inside, zero on the edge)
    * ``{"kind": "holes", "holes": [{"center": (x, y), "radius": r}, ...]}`` -
      the box minus circular holes

    Min/max composition of exact primitive distances, followed by one
    reinitialization pass.
    """
    pts = grid.nodes()
    if callable(shape):
        phi = np.asarray(shape(pts), dtype=float).reshape(grid.shape)
    else:
        kind = shape.get("kind", "full")
        box = -np.minimum.reduce([
            pts[:, 0] - grid.x0, grid.x1 - pts[:, 0],
            pts[:, 1] - grid.y0, grid.y1 - pts[:, 1]])
        phi = box
        if kind == "holes":
            for hole in shape.get("holes", []):
                c = np.asarray(hole["center"], dtype=float)
                r = float(hole["radius"])
                phi = np.maximum(phi, r - np.linalg.norm(pts - c, axis=1))
        elif kind != "full":
            raise ValueError(f"unknown shape kind {kind!r}")
        phi = phi.reshape(grid.shape)
    if np.all(phi >= 0.0):
        raise DegenerateShapeError("shape is empty (no negative level-set values)")
    if np.all(phi < 0.0):
        raise DegenerateShapeError("shape fills the grid (no zero level set)")
    ls = LevelSetField(grid, phi)
    if reinit_iters > 0:
        ls = reinitialize(ls, reinit_iters)
    return ls


# -- Hamilton-Jacobi advection ------------------------------------------------

def _pad_extrapolate(phi):
    """Two layers of linear-extrapolation ghost nodes.

    Plain value-copy ghosts would force a zero one-sided gradient at the grid
    edge, pinning any zero level that coincides with the box boundary; linear
    extrapolation keeps the eikonal structure there.
    """
    p = np.pad(phi, 2, mode="edge")
    p[0, :] = 3 * p[2, :] - 2 * p[3, :]
    p[1, :] = 2 * p[2, :] - p[3, :]
    p[-1, :] = 3 * p[-3, :] - 2 * p[-4, :]
    p[-2, :] = 2 * p[-3, :] - p[-4, :]
    p[:, 0] = 3 * p[:, 2] - 2 * p[:, 3]
    p[:, 1] = 2 * p[:, 2] - p[:, 3]
    p[:, -1] = 3 * p[:, -3] - 2 * p[:, -4]
    p[:, -2] = 2 * p[:, -3] - p[:, -4]
    return p


def _eno2_derivatives(phi, dx, dy):
    """One-sided ENO2 x/y derivatives; returns (dxm, dxp, dym, dyp)."""
    p = _pad_extrapolate(phi)

    def minmod(a, b):
        return np.where(a * b <= 0.0, 0.0, np.where(np.abs(a) < np.abs(b), a, b))

    # x direction; interior index range maps to p[2:-2]
    d2 = (p[2:, 2:-2] - 2 * p[1:-1, 2:-2] + p[:-2, 2:-2]) / dx**2  # at i-1..i+1 window
    dm = (p[2:-2, 2:-2] - p[1:-3, 2:-2]) / dx \
        + 0.5 * dx * minmod(d2[:-2], d2[1:-1])
    dp = (p[3:-1, 2:-2] - p[2:-2, 2:-2]) / dx \
        - 0.5 * dx * minmod(d2[1:-1], d2[2:])
    d2y = (p[2:-2, 2:] - 2 * p[2:-2, 1:-1] + p[2:-2, :-2]) / dy**2
    dmy = (p[2:-2, 2:-2] - p[2:-2, 1:-3]) / dy \
        + 0.5 * dy * minmod(d2y[:, :-2], d2y[:, 1:-1])
    dpy = (p[2:-2, 3:-1] - p[2:-2, 2:-2]) / dy \
        - 0.5 * dy * minmod(d2y[:, 1:-1], d2y[:, 2:])
    return dm, dp, dmy, dpy


def _godunov_gradnorm(phi, speed, dx, dy):
    """Godunov upwind |grad phi| for the speed field's sign."""
    dxm, dxp, dym, dyp = _eno2_derivatives(phi, dx, dy)
    pos = np.sqrt(np.maximum(dxm, 0.0)**2 + np.minimum(dxp, 0.0)**2
                  + np.maximum(dym, 0.0)**2 + np.minimum(dyp, 0.0)**2)
    neg = np.sqrt(np.minimum(dxm, 0.0)**2 + np.maximum(dxp, 0.0)**2
                  + np.minimum(dym, 0.0)**2 + np.maximum(dyp, 0.0)**2)
    return np.where(speed >= 0.0, pos, neg)


def advect(ls: LevelSetField, theta, T: float, cfl: float = 0.5) -> LevelSetField:
    """Transport the level set by normal speed ``theta`` for time ``T``.

    ``theta`` is a nodal scalar array (positive values grow the shape along
    the outward normal).  Explicit two-stage TVD stepping with ENO2 upwind
    differences and Neumann conditions at the grid boundary; the sub-step
    respects dt = cfl * spacing / max|theta|.
    """
    theta = np.asarray(theta, dtype=float).reshape(ls.grid.shape)
    vmax = np.abs(theta).max()
    if vmax == 0.0 or T <= 0.0:
        return ls.copy()
    dx, dy = ls.grid.dx, ls.grid.dy
    dt = cfl * ls.grid.spacing / vmax
    nsteps = max(1, int(np.ceil(T / dt)))
    dt = T / nsteps
    phi = ls.phi.copy()
    for _ in range(nsteps):
        k1 = phi - dt * theta * _godunov_gradnorm(phi, theta, dx, dy)
        k2 = k1 - dt * theta * _godunov_gradnorm(k1, theta, dx, dy)
        phi = 0.5 * (phi + k2)
    if not np.all(np.isfinite(phi)):
        raise FloatingPointError("advection produced non-finite values")
    return LevelSetField(ls.grid, phi, ls.stamp + 1)


# -- reinitialization ----------------------------------------------------------

def reinitialize(ls: LevelSetField, iters: int = 20, check_drift: bool = True) -> LevelSetField:
    """Restore the signed-distance property without moving the zero level.

    Pseudo-time iteration of sign(phi0) (|grad phi| - 1) = 0 with Godunov
    upwinding away from the interface and a subcell distance anchor on nodes
    whose stencil crosses the zero level, which keeps the interface pinned.
    """
    grid = ls.grid
    dx, dy = grid.dx, grid.dy
    h = grid.spacing
    phi0 = ls.phi.copy()
    phi = ls.phi.copy()

    p0 = np.pad(phi0, 1, mode="edge")
    cross = np.zeros_like(phi0, dtype=bool)
    for sx, sy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = p0[1 + sx:p0.shape[0] - 1 + sx or None, 1 + sy:p0.shape[1] - 1 + sy or None]
        cross |= (phi0 * nb) < 0.0
    # subcell distance estimate of Russo & Smereka at interface nodes
    gx0, gy0 = np.gradient(phi0, dx, dy, edge_order=1)
    slope = np.maximum(np.hypot(gx0, gy0), 1e-12)
    dist0 = phi0 / slope
    sgn = phi0 / np.sqrt(phi0**2 + h**2)

    dtau = 0.5 * h
    for _ in range(int(iters)):
        grad = _godunov_gradnorm(phi, sgn, dx, dy)
        upd = phi - dtau * sgn * (grad - 1.0)
        anchored = phi - (dtau / h) * (np.sign(phi0) * np.abs(phi) - dist0)
        phi = np.where(cross, anchored, upd)
    out = LevelSetField(grid, phi, ls.stamp)
    if check_drift:
        drift = _zero_level_drift(phi0, phi, grid)
        if drift > 0.25 * h:
            raise RuntimeError(
                f"reinitialization moved the zero level by {drift:.3e} "
                f"(> {0.25 * h:.3e})")
    return out


def _zero_level_drift(phi_old, phi_new, grid: Grid):
    """Max displacement of zero crossings along grid lines."""
    drift = 0.0
    for axis, d in ((0, grid.dx), (1, grid.dy)):
        a_old = np.take(phi_old, np.arange(phi_old.shape[axis] - 1), axis=axis)
        b_old = np.take(phi_old, np.arange(1, phi_old.shape[axis]), axis=axis)
        crossing = a_old * b_old < 0.0
        if not np.any(crossing):
            continue
        den_old = np.where(crossing, a_old - b_old, 1.0)
        s_old = np.where(crossing, a_old / den_old, 0.0)
        a_new = np.take(phi_new, np.arange(phi_new.shape[axis] - 1), axis=axis)
        b_new = np.take(phi_new, np.arange(1, phi_new.shape[axis]), axis=axis)
        denom = a_new - b_new
        ok = crossing & (np.abs(denom) > 1e-300) & (a_new * b_new <= 0.0)
        s_new = np.where(ok, a_new / np.where(denom == 0.0, 1.0, denom), s_old)
        drift = max(drift, float(np.max(np.abs(s_new - s_old)[crossing] * d, initial=0.0)))
    return drift


# -- curvature ------------------------------------------------------------------

def curvature(ls: LevelSetField, pts, grad_floor: float = 1e-8):
    """Mean curvature div(grad phi / |grad phi|) interpolated at points.

    Positive for a shrinking circle represented as negative-inside signed
    distance.  Raises when the interpolated |grad phi| vanishes.
    """
    grid = ls.grid
    dx, dy = grid.dx, grid.dy
    p = np.pad(ls.phi, 1, mode="edge")
    px = (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * dx)
    py = (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * dy)
    pxx = (p[2:, 1:-1] - 2 * p[1:-1, 1:-1] + p[:-2, 1:-1]) / dx**2
    pyy = (p[1:-1, 2:] - 2 * p[1:-1, 1:-1] + p[1:-1, :-2]) / dy**2
    pxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / (4 * dx * dy)
    norm2 = px**2 + py**2
    safe = np.maximum(norm2, grad_floor**2)
    kappa = (pxx * py**2 - 2 * px * py * pxy + pyy * px**2) / safe**1.5
    kappa = np.clip(kappa, -1.0 / grid.spacing, 1.0 / grid.spacing)
    gnorm = grid.interp(np.sqrt(norm2), pts)
    if np.any(gnorm < grad_floor):
        raise ValueError("level-set gradient vanishes at a curvature query point")
    return grid.interp(kappa, pts)


# -- mesh cutting ----------------------------------------------------------------

class BoundaryConfig:
    """Boundary labeling rules for cut meshes.

    ``dirichlet_side`` / ``neumann_side`` name a box side ("left", "right",
    "bottom", "top"); ``neumann_span`` restricts the Neumann side to a
    coordinate interval.  ``foundation`` plus ``contact_distance`` turn
    free facets with small gap into contact facets; ``contact_distance``
    None disables contact labeling.
    """

    def __init__(self, bounds, dirichlet_side="left", dirichlet_span=None,
                 neumann_side="right", neumann_span=None,
                 foundation=None, contact_distance=None, tol=1e-9):
        self.bounds = bounds
        self.dirichlet_side = dirichlet_side
        self.dirichlet_span = dirichlet_span
        self.neumann_side = neumann_side
        self.neumann_span = neumann_span
        self.foundation = foundation
        self.contact_distance = contact_distance
        self.tol = tol

    def _on_side(self, mids, side, span):
        x0, y0, x1, y1 = self.bounds
        coord = {"left": (0, x0), "right": (0, x1), "bottom": (1, y0), "top": (1, y1)}
        axis, value = coord[side]
        on = np.abs(mids[:, axis] - value) <= self.tol
        if span is not None:
            other = mids[:, 1 - axis]
            on &= (other >= span[0] - self.tol) & (other <= span[1] + self.tol)
        return on

    def label_facets(self, mids):
        labels = np.full(len(mids), FREE, dtype=np.int64)
        if self.foundation is not None and self.contact_distance is not None:
            gaps = self.foundation.gap(mids)
            labels[gaps <= self.contact_distance] = CONTACT
        if self.neumann_side is not None:
            labels[self._on_side(mids, self.neumann_side, self.neumann_span)] = NEUMANN
        if self.dirichlet_side is not None:
            labels[self._on_side(mids, self.dirichlet_side, self.dirichlet_span)] = DIRICHLET
        return labels


class CutMesh(TriMesh):
    """Conforming submesh of the background triangulation restricted to {phi<0}.

    ``provenance`` records, for each vertex, either ``("vertex", i)`` for an
    original background vertex or ``("edge", a, b, s)`` for a cut point at
    parameter ``s`` along background edge (a, b).
    """

    def __init__(self, vertices, triangles, facets, facet_labels, provenance):
        super().__init__(vertices, triangles, facets, facet_labels)
        self.provenance = provenance


def cut_mesh(background: TriMesh, ls: LevelSetField, config: BoundaryConfig,
             snap: float = 0.02, require_dirichlet: bool = True) -> CutMesh:
    """Cut the background mesh along the zero level set.

    Vertex level-set values are bilinear interpolations of the grid field;
    values within ``snap`` of a sign change along an edge are snapped to the
    nearer endpoint, which bounds the worst sub-triangle quality.  Boundary
    facets of the result are labeled through ``config``.
    """
    phi_v = ls.grid.interp(ls.phi, background.vertices).copy()

    # snap: zero crossings closer than `snap` of an edge length collapse onto
    # the endpoint (phi := 0 there, counted inside)
    tris = background.triangles
    edges = set()
    for tri in tris:
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            edges.add((min(a, b), max(a, b)))
    for a, b in sorted(edges):
        fa, fb = phi_v[a], phi_v[b]
        if fa * fb < 0.0:
            s = fa / (fa - fb)
            if s <= snap:
                phi_v[a] = 0.0
            elif s >= 1.0 - snap:
                phi_v[b] = 0.0

    inside = phi_v <= 0.0
    new_vertices = []
    vert_map = {}
    provenance = []

    def orig_vertex(i):
        key = ("v", int(i))
        if key not in vert_map:
            vert_map[key] = len(new_vertices)
            new_vertices.append(background.vertices[i])
            provenance.append(("vertex", int(i)))
        return vert_map[key]

    def cut_vertex(a, b):
        a, b = int(a), int(b)
        key = ("e", min(a, b), max(a, b))
        if key not in vert_map:
            fa, fb = phi_v[key[1]], phi_v[key[2]]
            s = fa / (fa - fb)
            pos = (1 - s) * background.vertices[key[1]] + s * background.vertices[key[2]]
            vert_map[key] = len(new_vertices)
            new_vertices.append(pos)
            provenance.append(("edge", key[1], key[2], float(s)))
        return vert_map[key]

    new_tris = []
    for tri in tris:
        ids = [int(v) for v in tri]
        flags = [inside[v] for v in ids]
        if not any(flags):
            continue
        if all(flags):
            new_tris.append([orig_vertex(v) for v in ids])
            continue
        # clip the triangle polygon against {phi <= 0}
        poly = []
        for k in range(3):
            a, b = ids[k], ids[(k + 1) % 3]
            if inside[a]:
                poly.append(orig_vertex(a))
            if phi_v[a] * phi_v[b] < 0.0:
                poly.append(cut_vertex(a, b))
        # dedupe consecutive duplicates (snapped configurations)
        cleaned = []
        for v in poly:
            if not cleaned or cleaned[-1] != v:
                cleaned.append(v)
        if len(cleaned) > 1 and cleaned[0] == cleaned[-1]:
            cleaned.pop()
        if len(cleaned) < 3:
            continue
        for k in range(1, len(cleaned) - 1):
            new_tris.append([cleaned[0], cleaned[k], cleaned[k + 1]])

    if not new_tris:
        raise InadmissibleShapeError("cut produced an empty mesh")

    vertices = np.array(new_vertices)
    triangles = np.array(new_tris, dtype=np.int64)
    # orientation + degeneracy control
    p = vertices[triangles]
    areas = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                   - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    swap = areas < 0.0
    triangles[swap] = triangles[swap][:, [0, 2, 1]]
    keep = np.abs(areas) > 1e-12 * background.h_mesh**2
    triangles = triangles[keep]
    used = np.unique(triangles)
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = vertices[used]
    provenance = [provenance[i] for i in used]
    triangles = remap[triangles]

    facets = boundary_facets_of(triangles)
    mids = 0.5 * (vertices[facets[:, 0]] + vertices[facets[:, 1]])
    labels = config.label_facets(mids)
    mesh = CutMesh(vertices, triangles, facets, labels, provenance)
    if require_dirichlet and not np.any(labels == DIRICHLET):
        raise InadmissibleShapeError("cut shape has an empty Dirichlet boundary")
    return mesh
