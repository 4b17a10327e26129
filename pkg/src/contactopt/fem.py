"""Lagrange P1/P2 finite elements on triangles.

Provides scalar/vector function spaces, quadrature, vectorized assembly of
the linear-elasticity stiffness matrix and load vector, symmetric Dirichlet
elimination, and a sparse SPD solve.  Displacement dofs are interleaved:
vector dof ``2*i`` is the x component of scalar dof ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import DIRICHLET, NEUMANN, TriMesh

__all__ = [
    "MaterialModel", "LoadData", "FeSpace", "Field",
    "lame_from_engineering", "assemble_elasticity", "assemble_load",
    "apply_dirichlet", "solve_spd", "SolverError",
]


class SolverError(RuntimeError):
    pass


def lame_from_engineering(E: float, nu: float):
    """Lame parameters (lambda, mu) from Young's modulus and Poisson ratio."""
    if E <= 0.0:
        raise ValueError("Young's modulus must be positive")
    if not -1.0 < nu < 0.5:
        raise ValueError("Poisson ratio must lie in (-1, 0.5)")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


@dataclass(frozen=True)
class MaterialModel:
    """Isotropic Hooke material, sigma = 2 mu eps + lambda tr(eps) I."""

    E: float = 1.0
    nu: float = 0.3

    @property
    def lame(self):
        return lame_from_engineering(self.E, self.nu)


@dataclass
class LoadData:
    """Body force and Neumann traction.

    Each entry is either a constant 2-vector or a callable ``pts -> (n, 2)``.
    The traction is only ever evaluated on Neumann facets.  ``grad_f`` /
    ``grad_tau`` optionally supply spatial gradients (callables returning
    (n, 2, 2) with entry [i, j] = d comp_i / d x_j) for shape-derivative
    transport terms; constants have zero gradient.
    """

    body_force: object = (0.0, 0.0)
    traction: object = (0.0, 0.0)
    grad_body_force: object = None
    grad_traction: object = None

    def f(self, pts):
        return _eval_vec(self.body_force, pts)

    def tau(self, pts):
        return _eval_vec(self.traction, pts)

    def grad_f(self, pts):
        return _eval_grad(self.grad_body_force, pts)

    def grad_tau(self, pts):
        return _eval_grad(self.grad_traction, pts)


def _eval_vec(spec, pts):
    if callable(spec):
        return np.asarray(spec(pts), dtype=float).reshape(len(pts), 2)
    return np.broadcast_to(np.asarray(spec, dtype=float), (len(pts), 2)).copy()


def _eval_grad(spec, pts):
    if spec is None:
        return np.zeros((len(pts), 2, 2))
    if callable(spec):
        return np.asarray(spec(pts), dtype=float).reshape(len(pts), 2, 2)
    return np.broadcast_to(np.asarray(spec, dtype=float), (len(pts), 2, 2)).copy()


# -- quadrature -------------------------------------------------------------

# barycentric triangle rules, weights summing to 1 (apply |T| outside)
_TRI_RULES = {
    2: (np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]]),
        np.array([1 / 3, 1 / 3, 1 / 3])),
    4: (np.array([
        [0.445948490915965, 0.445948490915965],
        [0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.108103018168070],
        [0.091576213509771, 0.091576213509771],
        [0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.816847572980459]]),
        np.array([0.223381589678011, 0.223381589678011, 0.223381589678011,
                  0.109951743655322, 0.109951743655322, 0.109951743655322])),
}


def triangle_rule(degree_exact: int):
    """Reference-triangle quadrature exact to the requested degree."""
    for d in sorted(_TRI_RULES):
        if d >= degree_exact:
            return _TRI_RULES[d]
    raise ValueError(f"no triangle rule of degree {degree_exact}")


def gauss_segment(npts: int = 5):
    """Gauss-Legendre points/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


# -- shape functions ---------------------------------------------------------

def _shape_p1(xi, eta):
    N = np.stack([1 - xi - eta, xi, eta], axis=-1)
    dN = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
                         (*np.shape(xi), 3, 2)).copy()
    return N, dN


def _shape_p2(xi, eta):
    lam = np.stack([1 - xi - eta, xi, eta], axis=-1)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    N = np.concatenate([
        lam * (2 * lam - 1),
        4 * np.stack([lam[..., 0] * lam[..., 1],
                      lam[..., 1] * lam[..., 2],
                      lam[..., 2] * lam[..., 0]], axis=-1)], axis=-1)
    dN = np.zeros((*np.shape(xi), 6, 2))
    for i in range(3):
        dN[..., i, :] = (4 * lam[..., i, None] - 1) * dlam[i]
    pairs = [(0, 1), (1, 2), (2, 0)]
    for k, (a, b) in enumerate(pairs):
        dN[..., 3 + k, :] = 4 * (lam[..., a, None] * dlam[b] + lam[..., b, None] * dlam[a])
    return N, dN


_EDGE_LOCAL = [(0, 1), (1, 2), (2, 0)]  # local edges, midpoint dofs 3,4,5 (P2)


def edge_trace(degree: int, t):
    """Shape function values along an edge parametrized by t in [0, 1].

    Returns (npts, ndof_per_facet) with dof order (vertex a, vertex b[,
    midpoint]).
    """
    t = np.asarray(t, dtype=float)
    if degree == 1:
        return np.stack([1 - t, t], axis=-1)
    return np.stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=-1)


# -- function space ----------------------------------------------------------

class FeSpace:
    """Scalar Lagrange space of degree 1 or 2 on a :class:`TriMesh`.

    Vector-valued fields use the same dof layout with 2 interleaved
    components.  Scalar dofs are the mesh vertices (P1) plus one dof per
    unique edge (P2), numbered after the vertices in first-seen order.
    """

    def __init__(self, mesh: TriMesh, degree: int = 2):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        nv = len(mesh.vertices)
        if degree == 1:
            self.ndof = nv
            self.cell_dofs = mesh.triangles.copy()
            self.dof_coords = mesh.vertices.copy()
            self._edge_ids = {}
        else:
            edge_ids = {}
            cell_dofs = np.empty((len(mesh.triangles), 6), dtype=np.int64)
            cell_dofs[:, :3] = mesh.triangles
            next_id = nv
            for ti, tri in enumerate(mesh.triangles):
                for k, (a, b) in enumerate(_EDGE_LOCAL):
                    key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                    eid = edge_ids.get(key)
                    if eid is None:
                        eid = next_id
                        edge_ids[key] = eid
                        next_id += 1
                    cell_dofs[ti, 3 + k] = eid
            self.ndof = next_id
            self.cell_dofs = cell_dofs
            self._edge_ids = edge_ids
            coords = np.empty((self.ndof, 2))
            coords[:nv] = mesh.vertices
            for (a, b), eid in edge_ids.items():
                coords[eid] = 0.5 * (mesh.vertices[a] + mesh.vertices[b])
            self.dof_coords = coords
        self._geometry()

    def _geometry(self):
        p = self.mesh.vertices[self.mesh.triangles]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (nt,2,2) cols
        self.detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        invJ = np.empty_like(J)
        invJ[:, 0, 0] = J[:, 1, 1]
        invJ[:, 0, 1] = -J[:, 0, 1]
        invJ[:, 1, 0] = -J[:, 1, 0]
        invJ[:, 1, 1] = J[:, 0, 0]
        invJ /= self.detJ[:, None, None]
        self.invJT = np.transpose(invJ, (0, 2, 1))
        self.tri_origin = p[:, 0]

    @property
    def ndof_per_cell(self):
        return 3 if self.degree == 1 else 6

    def shape(self, xi, eta):
        return (_shape_p1 if self.degree == 1 else _shape_p2)(xi, eta)

    def dirichlet_mask(self, labels=(DIRICHLET,), component=None):
        """Boolean mask over vector dofs for homogeneous boundary conditions.

        Marks both components of every scalar dof lying on a facet with one
        of the given labels; ``component=0 or 1`` restricts to that
        component.
        """
        sel = np.zeros(self.ndof, dtype=bool)
        for fi in range(len(self.mesh.facets)):
            if self.mesh.facet_labels[fi] not in labels:
                continue
            a, b = self.mesh.facets[fi]
            sel[a] = sel[b] = True
            if self.degree == 2:
                eid = self._edge_ids.get((min(a, b), max(a, b)))
                if eid is not None:
                    sel[eid] = True
        mask = np.zeros(2 * self.ndof, dtype=bool)
        if component is None:
            mask[0::2] = sel
            mask[1::2] = sel
        else:
            mask[component::2] = sel
        return mask

    def facet_dofs(self, facet_index: int):
        """Scalar dofs supported on a boundary facet (trace order a, b[, mid])."""
        a, b = self.mesh.facets[facet_index]
        if self.degree == 1:
            return np.array([a, b], dtype=np.int64)
        eid = self._edge_ids[(min(a, b), max(a, b))]
        return np.array([a, b, eid], dtype=np.int64)

    # -- point evaluation (used by transfers and boundary densities) -------

    def locate(self, pts, tol=1e-9):
        """Owning triangle and barycentric reference coords for each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri_idx = np.full(len(pts), -1, dtype=np.int64)
        ref = np.zeros((len(pts), 2))
        verts = self.mesh.vertices
        tris = self.mesh.triangles
        p0 = verts[tris[:, 0]]
        # brute-force barycentric test, vectorized over triangles per point
        for k, x in enumerate(pts):
            d = x - p0
            xi = self.invJT[:, 0, 0] * d[:, 0] + self.invJT[:, 1, 0] * d[:, 1]
            eta = self.invJT[:, 0, 1] * d[:, 0] + self.invJT[:, 1, 1] * d[:, 1]
            ok = (xi >= -tol) & (eta >= -tol) & (xi + eta <= 1 + tol)
            hits = np.nonzero(ok)[0]
            if len(hits) == 0:
                raise ValueError(f"point {x} outside the mesh")
            tri_idx[k] = hits[0]
            ref[k] = (xi[hits[0]], eta[hits[0]])
        return tri_idx, ref

    def eval_vector(self, values, pts):
        """Evaluate an interleaved vector field at arbitrary points."""
        tri_idx, ref = self.locate(pts)
        N, _ = self.shape(ref[:, 0], ref[:, 1])
        dofs = self.cell_dofs[tri_idx]
        vals = values.reshape(-1, 2)[dofs]  # (npts, ndpc, 2)
        return np.einsum("pd,pdc->pc", N, vals)


@dataclass
class Field:
    """Nodal field on a space; ``values`` has 2*ndof (vector) or ndof entries."""

    space: FeSpace
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(2 * self.space.ndof)
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")


# -- assembly ----------------------------------------------------------------

def _elasticity_D(lam, mu):
    # engineering-strain Voigt convention [exx, eyy, 2*exy]
    return np.array([[lam + 2 * mu, lam, 0.0],
                     [lam, lam + 2 * mu, 0.0],
                     [0.0, 0.0, mu]])


def assemble_elasticity(space: FeSpace, mat: MaterialModel) -> sp.csr_matrix:
    """Stiffness matrix of 2 mu eps(u):eps(v) + lambda div u div v.

    Returned without Dirichlet elimination; rigid motions lie in its kernel.
    """
    lam, mu = mat.lame
    D = _elasticity_D(lam, mu)
    pts, w = triangle_rule(2 * space.degree)
    _, dN = space.shape(pts[:, 0], pts[:, 1])  # (nq, ndpc, 2)
    nt = len(space.mesh.triangles)
    ndpc = space.ndof_per_cell
    # physical gradients: g[t, q, a, :] = invJT[t] @ dN[q, a, :]
    g = np.einsum("tij,qaj->tqai", space.invJT, dN)
    B = np.zeros((nt, len(w), 3, 2 * ndpc))
    B[:, :, 0, 0::2] = g[:, :, :, 0]
    B[:, :, 1, 1::2] = g[:, :, :, 1]
    B[:, :, 2, 0::2] = g[:, :, :, 1]
    B[:, :, 2, 1::2] = g[:, :, :, 0]
    DB = np.einsum("ij,tqjk->tqik", D, B)
    Ke = np.einsum("q,tqik,tqil,t->tkl", w, B, DB, 0.5 * np.abs(space.detJ))
    vec_dofs = np.empty((nt, 2 * ndpc), dtype=np.int64)
    vec_dofs[:, 0::2] = 2 * space.cell_dofs
    vec_dofs[:, 1::2] = 2 * space.cell_dofs + 1
    rows = np.repeat(vec_dofs, 2 * ndpc, axis=1).ravel()
    cols = np.tile(vec_dofs, (1, 2 * ndpc)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)),
                      shape=(2 * space.ndof, 2 * space.ndof)).tocsr()
    return K


def assemble_load(space: FeSpace, loads: LoadData) -> np.ndarray:
    """Load vector of the body force plus the Neumann traction."""
    F = np.zeros(2 * space.ndof)
    pts, w = triangle_rule(2 * space.degree)
    N, _ = space.shape(pts[:, 0], pts[:, 1])  # (nq, ndpc)
    nt = len(space.mesh.triangles)
    # physical quadrature points per triangle
    p = space.mesh.vertices[space.mesh.triangles]
    xq = np.einsum("qa,tac->tqc", np.stack([1 - pts[:, 0] - pts[:, 1],
                                            pts[:, 0], pts[:, 1]], axis=1), p)
    fv = loads.f(xq.reshape(-1, 2)).reshape(nt, len(w), 2)
    Fe = np.einsum("q,qa,tqc,t->tac", w, N, fv, 0.5 * np.abs(space.detJ))
    np.add.at(F, 2 * space.cell_dofs, Fe[:, :, 0])
    np.add.at(F, 2 * space.cell_dofs + 1, Fe[:, :, 1])

    neumann = space.mesh.facets_with_label(NEUMANN)
    if len(neumann):
        t, wt = gauss_segment(5)
        Nt = edge_trace(space.degree, t)  # (nq, ndofs)
        for fi in neumann:
            a, b = space.mesh.facets[fi]
            pa, pb = space.mesh.vertices[a], space.mesh.vertices[b]
            length = np.linalg.norm(pb - pa)
            xq = pa[None, :] + t[:, None] * (pb - pa)[None, :]
            tv = loads.tau(xq)
            dofs = space.facet_dofs(fi)
            contrib = np.einsum("q,qa,qc->ac", wt * length, Nt, tv)
            np.add.at(F, 2 * dofs, contrib[:, 0])
            np.add.at(F, 2 * dofs + 1, contrib[:, 1])
    return F


def apply_dirichlet(K: sp.csr_matrix, F: np.ndarray, mask: np.ndarray, values=None):
    """Symmetric elimination of constrained dofs.

    Zeroes rows/columns of masked dofs, puts 1 on the diagonal, and moves
    prescribed values (default 0) to the right-hand side.  Returns (K, F)
    as new objects.
    """
    mask = np.asarray(mask, dtype=bool)
    n = K.shape[0]
    if values is None:
        values = np.zeros(n)
    F = F - K @ (values * mask)
    keep = sp.diags((~mask).astype(float))
    K = keep @ K @ keep + sp.diags(mask.astype(float))
    F = np.where(mask, values, F)
    return K.tocsr(), F


def solve_spd(K: sp.csr_matrix, F: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Direct sparse solve with residual verification and CG fallback.

    Raises :class:`SolverError` when neither path reaches the requested
    relative residual.
    """
    Fn = np.linalg.norm(F)
    if Fn == 0.0:
        return np.zeros_like(F)
    try:
        lu = spla.splu(K.tocsc())
        x = lu.solve(F)
    except RuntimeError as exc:  # singular factorization
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    res = np.linalg.norm(K @ x - F) / Fn
    if res <= max(tol, 1e-12):
        return x
    # iterative fallback with diagonal preconditioner
    d = K.diagonal()
    if np.any(d <= 0.0):
        raise SolverError("matrix is not positive definite (nonpositive diagonal)")
    M = sp.diags(1.0 / d)
    x, info = spla.cg(K, F, rtol=tol, maxiter=10 * K.shape[0], M=M)
    res = np.linalg.norm(K @ x - F) / Fn
    if info != 0 or res > 100 * tol:
        raise SolverError(f"linear solver did not converge (residual {res:.3e})")
    return x
