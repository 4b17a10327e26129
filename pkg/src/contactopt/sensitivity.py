"""Objective, adjoint state and shape derivatives.

The cost is J = a1 * compliance + a2 * volume.  Its shape derivative along a
deformation field theta is evaluated in distributed (volume-integral) form

    dJ[theta] = -L[theta](p) + int_Omega j(u) div theta
                + int_bnd k(u) div_G theta,

where p solves the adjoint problem b_eps(p, v) = -a1 L(v) and L[theta] is the
right-hand side of the material-derivative problem b_eps(u_dot, v) =
L[theta](v).  Both dJ forms (via the adjoint or via u_dot) are assembled here
and agree to solver precision because b_eps is symmetric.

Everything is reduced to per-quadrature-point coefficient pairs (c, C) with

    dJ[theta] = sum_q w_q ( c_q . theta(x_q) + C_q : grad theta(x_q) ),

which serves three consumers: direct evaluation against analytic fields
(finite-difference checks), scattering onto the level-set grid to drive the
H1-regularized descent velocity, and the material-derivative right-hand side
(the same terms tested against finite element functions instead of theta).

Index conventions: (grad v)_{ij} = d v_i / d x_j and C : grad theta =
sum_ij C_ij d theta_i / d x_j.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import projections as proj
from .contact import ContactProblem, ContactState, biactive_measure
from .fem import Field, gauss_segment, edge_trace, triangle_rule
from .mesh import CONTACT, NEUMANN

__all__ = [
    "ObjectiveConfig", "objective", "solve_adjoint",
    "ShapeGradient", "build_shape_gradient",
    "assemble_material_rhs", "solve_material_derivative", "MaterialDerivativeResult",
    "objective_derivative_via_material",
    "BoundaryDensities", "shape_derivative_boundary",
    "AnalyticField", "NormalVelocityField",
    "GridH1Regularizer",
]


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weights of the compliance + volume objective."""

    compliance_weight: float = 15.0
    volume_weight: float = 0.01

    def __post_init__(self):
        if self.compliance_weight < 0 or self.volume_weight < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.compliance_weight == 0 and self.volume_weight == 0:
            raise ValueError("objective weights cannot both vanish")


def objective(problem: ContactProblem, state: ContactState, cfg: ObjectiveConfig):
    """Return (J, compliance, volume) for a converged state."""
    compliance = float(problem.F @ state.u.values)
    volume = problem.space.mesh.area
    return (cfg.compliance_weight * compliance + cfg.volume_weight * volume,
            compliance, volume)


def solve_adjoint(problem: ContactProblem, state: ContactState,
                  cfg: ObjectiveConfig) -> Field:
    """Adjoint state: b_eps(p, v) = -a1 * L(v) with frozen contact branches."""
    rhs = -cfg.compliance_weight * problem.F
    rhs = np.where(problem.mask, 0.0, rhs)
    lu = problem.frozen_jacobian_solver(state)
    p = lu.solve(rhs)
    return Field(problem.space, p)


# -- deformation fields -------------------------------------------------------

class AnalyticField:
    """Deformation field from callables; gradient by central differences if absent."""

    def __init__(self, value_fn, grad_fn=None, fd_step=1e-7):
        self._value = value_fn
        self._grad = grad_fn
        self._h = fd_step

    def value(self, pts):
        return np.asarray(self._value(np.atleast_2d(pts)), dtype=float).reshape(-1, 2)

    def grad(self, pts):
        pts = np.atleast_2d(pts)
        if self._grad is not None:
            return np.asarray(self._grad(pts), dtype=float).reshape(len(pts), 2, 2)
        G = np.zeros((len(pts), 2, 2))
        for j, e in enumerate(np.eye(2)):
            G[:, :, j] = (self.value(pts + self._h * e)
                          - self.value(pts - self._h * e)) / (2 * self._h)
        return G


class MeshP1Field:
    """Piecewise-linear interpolant of a vector field over a triangulation.

    Moving mesh vertices by t * theta(vertex) transports any interior point by
    the P1 interpolant of theta, so finite-difference checks of the shape
    derivative must pair with this field rather than the smooth one.
    """

    def __init__(self, space, nodal_values):
        self.space = space
        nv = len(space.mesh.vertices)
        self.nodal = np.asarray(nodal_values, dtype=float).reshape(nv, 2)

    @classmethod
    def interpolate(cls, space, field):
        return cls(space, field.value(space.mesh.vertices))

    def value(self, pts):
        tri, ref = self.space.locate(pts)
        lam = np.stack([1 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]], axis=1)
        vals = self.nodal[self.space.mesh.triangles[tri]]
        return np.einsum("pa,pac->pc", lam, vals)

    def grad(self, pts):
        tri, _ = self.space.locate(pts)
        dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        g = np.einsum("pij,aj->pai", self.space.invJT[tri], dlam)
        vals = self.nodal[self.space.mesh.triangles[tri]]
        return np.einsum("paj,pac->pcj", g, vals)


class NormalVelocityField:
    """theta(x) * n_ext(x): scalar grid speed times the level-set normal.

    Both factors are bilinear interpolants of nodal data, so evaluating this
    field at the shape-gradient quadrature points reproduces exactly the
    linear algebra of the grid scatter (descent identity holds to rounding).
    """

    def __init__(self, grid, theta_nodal, normal_nodal):
        self.grid = grid
        self.theta = np.asarray(theta_nodal, dtype=float).reshape(grid.shape)
        self.nx, self.ny = normal_nodal

    def value(self, pts):
        th = self.grid.interp(self.theta, pts)
        return np.stack([th * self.grid.interp(self.nx, pts),
                         th * self.grid.interp(self.ny, pts)], axis=1)

    def grad(self, pts):
        th = self.grid.interp(self.theta, pts)
        gth = self.grid.interp_grad(self.theta, pts)
        n = np.stack([self.grid.interp(self.nx, pts),
                      self.grid.interp(self.ny, pts)], axis=1)
        gn = np.stack([self.grid.interp_grad(self.nx, pts),
                       self.grid.interp_grad(self.ny, pts)], axis=1)
        return n[:, :, None] * gth[:, None, :] + th[:, None, None] * gn


# -- shared quadrature-point data ----------------------------------------------

def _volume_point_data(problem: ContactProblem, u_vec, p_vec):
    """u, p, grad u, grad p, stresses at volume quadrature points."""
    space = problem.space
    pts, w = triangle_rule(2 * space.degree)
    N, dN = space.shape(pts[:, 0], pts[:, 1])
    nt = len(space.mesh.triangles)
    lam, mu = problem.material.lame
    p3 = space.mesh.vertices[space.mesh.triangles]
    lamb = np.stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=1)
    xq = np.einsum("qa,tac->tqc", lamb, p3)
    wq = (w[None, :] * 0.5 * np.abs(space.detJ)[:, None])
    g = np.einsum("tij,qaj->tqai", space.invJT, dN)
    dofvals_u = u_vec.reshape(-1, 2)[space.cell_dofs]       # (nt, nd, 2)
    dofvals_p = p_vec.reshape(-1, 2)[space.cell_dofs]
    uq = np.einsum("qa,tac->tqc", N, dofvals_u)
    pq = np.einsum("qa,tac->tqc", N, dofvals_p)
    gu = np.einsum("tqaj,tac->tqcj", g, dofvals_u)          # (nt, nq, 2, 2)
    gp = np.einsum("tqaj,tac->tqcj", g, dofvals_p)

    def sigma(gv):
        eps = 0.5 * (gv + np.swapaxes(gv, -1, -2))
        tr = eps[..., 0, 0] + eps[..., 1, 1]
        return 2 * mu * eps + lam * tr[..., None, None] * np.eye(2)

    return dict(x=xq.reshape(-1, 2), w=wq.reshape(-1),
                u=uq.reshape(-1, 2), p=pq.reshape(-1, 2),
                gu=gu.reshape(-1, 2, 2), gp=gp.reshape(-1, 2, 2),
                su=sigma(gu).reshape(-1, 2, 2), sp=sigma(gp).reshape(-1, 2, 2))


class _FacetData:
    """Quadrature data on a set of boundary facets (traces + owner gradients)."""

    def __init__(self, problem: ContactProblem, facet_indices):
        space = problem.space
        mesh = space.mesh
        self.facets = np.asarray(facet_indices, dtype=np.int64)
        nq = 5
        t, wq = gauss_segment(nq)
        self.trace = edge_trace(space.degree, t)
        nf = len(self.facets)
        nd = self.trace.shape[1]
        self.dofs = np.zeros((nf, nd), dtype=np.int64)
        self.x = np.zeros((nf, nq, 2))
        self.w = np.zeros((nf, nq))
        self.normal = np.zeros((nf, 2))
        owners = mesh.facet_owners()
        all_normals = mesh.facet_normals()
        self.owner = np.zeros(nf, dtype=np.int64)
        for k, fi in enumerate(self.facets):
            a, b = mesh.facets[fi]
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            self.dofs[k] = space.facet_dofs(fi)
            self.x[k] = pa[None, :] + t[:, None] * (pb - pa)[None, :]
            self.w[k] = wq * np.linalg.norm(pb - pa)
            self.normal[k] = all_normals[fi]
            self.owner[k] = owners[fi]
        self.space = space
        self.nq = nq

    @property
    def points(self):
        return self.x.reshape(-1, 2)

    @property
    def weights(self):
        return self.w.reshape(-1)

    @property
    def normals(self):
        return np.repeat(self.normal, self.nq, axis=0)

    def trace_values(self, vec):
        vals = vec.reshape(-1, 2)[self.dofs]
        return np.einsum("qd,fdc->fqc", self.trace, vals).reshape(-1, 2)

    def owner_gradients(self, vec):
        """Gradient of the interleaved field inside the owning triangle."""
        space = self.space
        pts = self.points
        tri = np.repeat(self.owner, self.nq)
        p0 = space.tri_origin[tri]
        d = pts - p0
        # reference coordinates via the inverse affine map
        invJT = space.invJT[tri]
        xi = invJT[:, 0, 0] * d[:, 0] + invJT[:, 1, 0] * d[:, 1]
        eta = invJT[:, 0, 1] * d[:, 0] + invJT[:, 1, 1] * d[:, 1]
        _, dN = space.shape(xi, eta)                      # (npts, nd, 2)
        g = np.einsum("pij,paj->pai", invJT, dN)
        vals = vec.reshape(-1, 2)[space.cell_dofs[tri]]   # (npts, nd, 2)
        return np.einsum("paj,pac->pcj", g, vals)

    def scatter(self, load, out):
        """Accumulate int f . v style facet loads into an interleaved vector."""
        nf, nq = self.w.shape
        loadf = (self.weights[:, None] * load).reshape(nf, nq, 2)
        contrib = np.einsum("qd,fqc->fdc", self.trace, loadf)
        np.add.at(out, 2 * self.dofs, contrib[:, :, 0])
        np.add.at(out, 2 * self.dofs + 1, contrib[:, :, 1])


def _contact_point_terms(problem: ContactProblem, state: ContactState, p_vec,
                         fdata: _FacetData):
    """Per-point contact factors shared by the theta- and v-paths."""
    eps = problem.config.eps
    u_t = state.u_t
    pen = state.penetration
    R_n = proj.pmax(pen)
    H = proj.heaviside(pen)
    d_alpha, d_z, _ = proj.dq_branches(problem.alpha_q, u_t, problem.config.tie_tol)
    if problem.model != "tresca":
        d_z = np.zeros_like(d_z)
        d_alpha = np.zeros_like(d_alpha)
        q_t = np.zeros_like(u_t)
    else:
        q_t = np.where(problem.alpha_q > 0.0,
                       np.clip(u_t, -problem.alpha_q, problem.alpha_q), 0.0)
    pv = fdata.trace_values(p_vec)
    uv = fdata.trace_values(state.u.values)
    n_rig = problem.nrig_q
    that = problem.tang_q
    dn = problem.dnrig_q
    return dict(eps=eps, R_n=R_n, H=H, q_t=q_t, d_alpha=d_alpha, d_z=d_z,
                u_n=np.einsum("pc,pc->p", uv, n_rig),
                p_n=np.einsum("pc,pc->p", pv, n_rig),
                p_ts=np.einsum("pc,pc->p", pv, that),
                pv=pv, uv=uv, n_rig=n_rig, that=that, dn=dn,
                grad_gt=problem.grad_gt_q)


# -- distributed shape gradient --------------------------------------------------

class ShapeGradient:
    """dJ[theta] as per-point linear coefficients plus evaluation helpers."""

    def __init__(self, pts, w, c, C):
        self.pts = pts
        self.w = w
        self.c = c
        self.C = C

    def evaluate(self, theta) -> float:
        """dJ[theta] for any field exposing value/grad."""
        tv = theta.value(self.pts)
        tg = theta.grad(self.pts)
        return float(np.sum(self.w * (np.einsum("pc,pc->p", self.c, tv)
                                      + np.einsum("pij,pij->p", self.C, tg))))

    def scatter_to_grid(self, grid, normal_nodal):
        """G_i = dJ[psi_i * n_ext] for every bilinear grid basis function."""
        nx_nodal, ny_nodal = normal_nodal
        pts = self.pts
        n = np.stack([grid.interp(nx_nodal, pts), grid.interp(ny_nodal, pts)], axis=1)
        gn = np.stack([grid.interp_grad(nx_nodal, pts),
                       grid.interp_grad(ny_nodal, pts)], axis=1)  # (np, 2, 2)
        scalar = (np.einsum("pc,pc->p", self.c, n)
                  + np.einsum("pij,pij->p", self.C, gn))
        vec = np.einsum("pij,pi->pj", self.C, n)
        i, j, s, t = grid.cell_of(pts)
        wgt = self.w
        psi = np.stack([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t], axis=1)
        dpsi_x = np.stack([-(1 - t), (1 - t), -t, t], axis=1) / grid.dx
        dpsi_y = np.stack([-(1 - s), -s, (1 - s), s], axis=1) / grid.dy
        corners = np.stack([i * (grid.ny + 1) + j,
                            (i + 1) * (grid.ny + 1) + j,
                            i * (grid.ny + 1) + (j + 1),
                            (i + 1) * (grid.ny + 1) + (j + 1)], axis=1)
        G = np.zeros((grid.nx + 1) * (grid.ny + 1))
        contrib = wgt[:, None] * (scalar[:, None] * psi
                                  + vec[:, 0, None] * dpsi_x + vec[:, 1, None] * dpsi_y)
        np.add.at(G, corners, contrib)
        return G


def build_shape_gradient(problem: ContactProblem, state: ContactState,
                         adjoint: Field, cfg: ObjectiveConfig) -> ShapeGradient:
    """Assemble the distributed derivative dJ[theta] of the compliance+volume
    objective at a converged state with its adjoint."""
    a1 = cfg.compliance_weight
    u_vec = state.u.values
    p_vec = adjoint.values
    vol = _volume_point_data(problem, u_vec, p_vec)
    loads = problem.loads
    nvp = len(vol["w"])
    eye = np.eye(2)

    fq = loads.f(vol["x"])
    gfq = loads.grad_f(vol["x"])
    ju = a1 * np.einsum("pc,pc->p", fq, vol["u"]) + cfg.volume_weight
    c_vol = -np.einsum("pij,pi->pj", gfq, vol["p"])
    C_vol = (ju - np.einsum("pc,pc->p", fq, vol["p"]))[:, None, None] * eye
    # + a'(u, p)
    sig_ue = np.einsum("pij,pij->p", vol["su"],
                       0.5 * (vol["gp"] + np.swapaxes(vol["gp"], -1, -2)))
    C_vol += sig_ue[:, None, None] * eye
    C_vol -= np.einsum("pki,pkj->pij", vol["gu"], vol["sp"])
    C_vol -= np.einsum("pki,pkj->pij", vol["gp"], vol["su"])

    pts_all = [vol["x"]]
    w_all = [vol["w"]]
    c_all = [c_vol]
    C_all = [C_vol]

    # Neumann facets: load transport and the k(u) div_G theta term
    mesh = problem.space.mesh
    neumann = mesh.facets_with_label(NEUMANN)
    if len(neumann):
        fd = _FacetData(problem, neumann)
        pts = fd.points
        n = fd.normals
        tau = loads.tau(pts)
        gtau = loads.grad_tau(pts)
        pv = fd.trace_values(p_vec)
        uv = fd.trace_values(u_vec)
        ku = a1 * np.einsum("pc,pc->p", tau, uv)
        taup = np.einsum("pc,pc->p", tau, pv)
        tangential = eye[None] - n[:, :, None] * n[:, None, :]
        C_b = (ku - taup)[:, None, None] * tangential
        c_b = -np.einsum("pij,pi->pj", gtau, pv)
        pts_all.append(pts)
        w_all.append(fd.weights)
        c_all.append(c_b)
        C_all.append(C_b)

    # contact facets
    if len(problem.contact_facets):
        fd = _FacetData(problem, problem.contact_facets)
        ct = _contact_point_terms(problem, state, p_vec, fdata=fd)
        eps = ct["eps"]
        n = fd.normals
        tangential = eye[None] - n[:, :, None] * n[:, None, :]
        dnT_p = np.einsum("pij,pi->pj", ct["dn"], ct["pv"])      # (grad n)^T p
        dnT_u = np.einsum("pij,pi->pj", ct["dn"], ct["uv"])
        dnT_t = np.einsum("pij,pi->pj", ct["dn"], ct["that"])
        c_c = (ct["R_n"][:, None] * dnT_p
               + (ct["H"] * ct["p_n"])[:, None] * (dnT_u + ct["n_rig"])
               - (ct["q_t"] * ct["p_n"])[:, None] * dnT_t
               - (ct["d_z"] * ct["u_n"] * ct["p_ts"])[:, None] * dnT_t) / eps
        c_c += (ct["d_alpha"] * ct["p_ts"])[:, None] * ct["grad_gt"]
        C_c = ((ct["R_n"] * ct["p_n"] + ct["q_t"] * ct["p_ts"]) / eps)[:, None, None] \
            * tangential
        pts_all.append(fd.points)
        w_all.append(fd.weights)
        c_all.append(c_c)
        C_all.append(C_c)

    return ShapeGradient(np.concatenate(pts_all), np.concatenate(w_all),
                         np.concatenate(c_all), np.concatenate(C_all))


# -- material derivative ----------------------------------------------------------

@dataclass
class MaterialDerivativeResult:
    w: Field
    rhs: np.ndarray
    residual: float
    flagged: bool


def assemble_material_rhs(problem: ContactProblem, state: ContactState,
                          theta) -> np.ndarray:
    """Right-hand side L[theta] of the material-derivative problem.

    ``theta`` exposes value/grad; the result is eliminated on Dirichlet dofs.
    """
    space = problem.space
    loads = problem.loads
    u_vec = state.u.values
    rhs = np.zeros(2 * space.ndof)

    # volume terms: (div theta f + grad f theta) . v  -  a'(u, v)
    pts, wref = triangle_rule(2 * space.degree)
    N, dN = space.shape(pts[:, 0], pts[:, 1])
    lamb = np.stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=1)
    p3 = space.mesh.vertices[space.mesh.triangles]
    xq = np.einsum("qa,tac->tqc", lamb, p3)
    nt, nq = xq.shape[:2]
    xf = xq.reshape(-1, 2)
    wq = (wref[None, :] * 0.5 * np.abs(space.detJ)[:, None]).reshape(-1)
    th = theta.value(xf)
    gth = theta.grad(xf)
    divth = gth[:, 0, 0] + gth[:, 1, 1]
    fq = loads.f(xf)
    gfq = loads.grad_f(xf)
    fvec = divth[:, None] * fq + np.einsum("pij,pj->pi", gfq, th)

    lam, mu = problem.material.lame
    g = np.einsum("tij,qaj->tqai", space.invJT, dN)
    du = np.einsum("tqaj,tac->tqcj", g, u_vec.reshape(-1, 2)[space.cell_dofs])
    du = du.reshape(-1, 2, 2)

    def sigma_of(gv):
        epsm = 0.5 * (gv + np.swapaxes(gv, -1, -2))
        tr = epsm[..., 0, 0] + epsm[..., 1, 1]
        return 2 * mu * epsm + lam * tr[..., None, None] * np.eye(2)

    su = sigma_of(du)
    du_gth = np.einsum("pik,pkj->pij", du, gth)
    eps_prime_u = -0.5 * (du_gth + np.swapaxes(du_gth, -1, -2))
    Sig = -(sigma_of(eps_prime_u)
            - np.einsum("pik,pjk->pij", su, gth)
            + divth[:, None, None] * su)

    # scatter: sum_q w (f . phi + Sig : grad phi)
    fvec_t = (wq[:, None] * fvec).reshape(nt, nq, 2)
    Fe = np.einsum("qa,tqc->tac", N, fvec_t)
    Sig_t = (wq[:, None, None] * Sig).reshape(nt, nq, 2, 2)
    Fe += np.einsum("tqai,tqci->tac", g, Sig_t)
    np.add.at(rhs, 2 * space.cell_dofs, Fe[:, :, 0])
    np.add.at(rhs, 2 * space.cell_dofs + 1, Fe[:, :, 1])

    # Neumann transport
    mesh = space.mesh
    neumann = mesh.facets_with_label(NEUMANN)
    if len(neumann):
        fd = _FacetData(problem, neumann)
        ptsb = fd.points
        n = fd.normals
        thb = theta.value(ptsb)
        gthb = theta.grad(ptsb)
        divG = (gthb[:, 0, 0] + gthb[:, 1, 1]
                - np.einsum("pi,pij,pj->p", n, gthb, n))
        tau = loads.tau(ptsb)
        gtau = loads.grad_tau(ptsb)
        load = divG[:, None] * tau + np.einsum("pij,pj->pi", gtau, thb)
        fd.scatter(load, rhs)

    # contact transport
    if len(problem.contact_facets):
        fd = _FacetData(problem, problem.contact_facets)
        ct = _contact_point_terms(problem, state, np.zeros_like(u_vec), fdata=fd)
        eps = ct["eps"]
        ptsc = fd.points
        n = fd.normals
        thc = theta.value(ptsc)
        gthc = theta.grad(ptsc)
        divG = (gthc[:, 0, 0] + gthc[:, 1, 1]
                - np.einsum("pi,pij,pj->p", n, gthc, n))
        dn_th = np.einsum("pij,pj->pi", ct["dn"], thc)       # (grad n) theta
        un_p = np.einsum("pc,pc->p", ct["uv"], dn_th)        # u_{n'}
        gprime = -np.einsum("pc,pc->p", thc, ct["n_rig"])    # g' = -theta . n
        t_dn_th = np.einsum("pc,pc->p", ct["that"], dn_th)   # t . (grad n) theta
        load = -(ct["R_n"][:, None] * (divG[:, None] * ct["n_rig"] + dn_th)) / eps
        load -= ((ct["H"] * (un_p - gprime)) / eps)[:, None] * ct["n_rig"]
        load -= ((ct["q_t"] * divG) / eps)[:, None] * ct["that"]
        load += ((ct["q_t"] * t_dn_th) / eps)[:, None] * ct["n_rig"]
        beta = np.einsum("pc,pc->p", ct["grad_gt"], thc)
        load -= (ct["d_alpha"] * beta)[:, None] * ct["that"]
        load += ((ct["d_z"] * ct["u_n"] * t_dn_th) / eps)[:, None] * ct["that"]
        fd.scatter(load, rhs)

    return np.where(problem.mask, 0.0, rhs)


def solve_material_derivative(problem: ContactProblem, state: ContactState,
                              theta, warn_band: float = 1e-6) -> MaterialDerivativeResult:
    """Solve b_eps(w, v) = L[theta](v) with branches frozen at the state.

    The result is flagged (not rejected) when the biactive warning band has
    positive measure, where the derivative is only directional.
    """
    rhs = assemble_material_rhs(problem, state, theta)
    lu = problem.frozen_jacobian_solver(state)
    w = lu.solve(rhs)
    B = problem.jacobian(state.u.values)
    rnorm = np.linalg.norm(B @ w - rhs)
    ref = max(np.linalg.norm(rhs), 1e-300)
    diag = biactive_measure(problem, state, warn_band=warn_band)
    return MaterialDerivativeResult(Field(problem.space, w), rhs,
                                    rnorm / ref, not diag.clean)


def objective_derivative_via_material(problem: ContactProblem, state: ContactState,
                                      theta, cfg: ObjectiveConfig,
                                      mder: MaterialDerivativeResult | None = None):
    """dJ[theta] through the material derivative (the j', k' route)."""
    if mder is None:
        mder = solve_material_derivative(problem, state, theta)
    u_vec = state.u.values
    w_vec = mder.w.values
    a1 = cfg.compliance_weight
    space = problem.space
    loads = problem.loads

    # volume: a1 f . w + (a1 f . u + a2) div theta
    pts, wref = triangle_rule(2 * space.degree)
    N, _ = space.shape(pts[:, 0], pts[:, 1])
    lamb = np.stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=1)
    p3 = space.mesh.vertices[space.mesh.triangles]
    xq = np.einsum("qa,tac->tqc", lamb, p3).reshape(-1, 2)
    wq = (wref[None, :] * 0.5 * np.abs(space.detJ)[:, None]).reshape(-1)
    uu = u_vec.reshape(-1, 2)[space.cell_dofs]
    ww = w_vec.reshape(-1, 2)[space.cell_dofs]
    uq = np.einsum("qa,tac->tqc", N, uu).reshape(-1, 2)
    wqv = np.einsum("qa,tac->tqc", N, ww).reshape(-1, 2)
    fq = loads.f(xq)
    divth = np.einsum("pii->p", theta.grad(xq))
    val = np.sum(wq * (a1 * np.einsum("pc,pc->p", fq, wqv)
                       + (a1 * np.einsum("pc,pc->p", fq, uq)
                          + cfg.volume_weight) * divth))

    neumann = space.mesh.facets_with_label(NEUMANN)
    if len(neumann):
        fd = _FacetData(problem, neumann)
        ptsb = fd.points
        n = fd.normals
        gthb = theta.grad(ptsb)
        divG = (gthb[:, 0, 0] + gthb[:, 1, 1]
                - np.einsum("pi,pij,pj->p", n, gthb, n))
        tau = loads.tau(ptsb)
        uv = fd.trace_values(u_vec)
        wv = fd.trace_values(w_vec)
        val += np.sum(fd.weights * (a1 * np.einsum("pc,pc->p", tau, wv)
                                    + a1 * np.einsum("pc,pc->p", tau, uv) * divG))
    return float(val)


# -- boundary (Hadamard) form ------------------------------------------------------

@dataclass
class BoundaryDensities:
    """Facet-quadrature densities of the boundary-form derivative.

    ``dJ[theta n] = sum w * density * theta`` with ``density`` the sum of the
    generic term (all of the boundary), the Neumann term and the contact term
    at each point.  Intended for diagnostics and cross-validation of the
    distributed form.
    """

    pts: np.ndarray
    w: np.ndarray
    density_A: np.ndarray
    density_B: np.ndarray
    density_C: np.ndarray

    @property
    def total(self):
        return self.density_A + self.density_B + self.density_C

    def evaluate(self, theta_scalar) -> float:
        """theta_scalar: callable pts -> (n,) normal speed."""
        th = np.asarray(theta_scalar(self.pts), dtype=float).reshape(-1)
        return float(np.sum(self.w * self.total * th))


def shape_derivative_boundary(problem: ContactProblem, state: ContactState,
                              adjoint: Field, cfg: ObjectiveConfig,
                              curvature_fn=None) -> BoundaryDensities:
    """Hadamard boundary densities of dJ (diagnostics path).

    ``curvature_fn(pts) -> kappa`` typically wraps the level set; facets where
    it fails fall back to zero curvature with a warning.  Normal derivatives
    of the boundary integrands are taken from the analytic chain rule applied
    to the finite element interpolants inside the owning triangle.
    """
    a1 = cfg.compliance_weight
    u_vec = state.u.values
    p_vec = adjoint.values
    mesh = problem.space.mesh
    fd = _FacetData(problem, np.arange(len(mesh.facets)))
    pts = fd.points
    n = fd.normals
    w = fd.weights
    lam, mu = problem.material.lame
    loads = problem.loads

    kappa = np.zeros(len(pts))
    if curvature_fn is not None:
        try:
            kappa = np.asarray(curvature_fn(pts), dtype=float).reshape(-1)
        except ValueError:
            warnings.warn("curvature unavailable; boundary form uses kappa = 0")

    gu = fd.owner_gradients(u_vec)
    gp = fd.owner_gradients(p_vec)
    uv = fd.trace_values(u_vec)
    pv = fd.trace_values(p_vec)

    def sigma_of(gv):
        epsm = 0.5 * (gv + np.swapaxes(gv, -1, -2))
        tr = epsm[..., 0, 0] + epsm[..., 1, 1]
        return 2 * mu * epsm + lam * tr[..., None, None] * np.eye(2)

    su = sigma_of(gu)
    epsp = 0.5 * (gp + np.swapaxes(gp, -1, -2))
    fq = loads.f(pts)
    dens_A = (a1 * np.einsum("pc,pc->p", fq, uv) + cfg.volume_weight
              + np.einsum("pij,pij->p", su, epsp)
              - np.einsum("pc,pc->p", fq, pv))

    labels = mesh.facet_labels[np.repeat(fd.facets, fd.nq)]
    dens_B = np.zeros(len(pts))
    on_N = labels == NEUMANN
    if np.any(on_N):
        tau = loads.tau(pts)
        gtau = loads.grad_tau(pts)
        ku = a1 * np.einsum("pc,pc->p", tau, uv)
        # grad of k(u) and of tau.p inside the owning element
        grad_ku = a1 * (np.einsum("pij,pi->pj", gtau, uv)
                        + np.einsum("pcj,pc->pj", gu, tau))
        taup = np.einsum("pc,pc->p", tau, pv)
        grad_taup = (np.einsum("pij,pi->pj", gtau, pv)
                     + np.einsum("pcj,pc->pj", gp, tau))
        dn_ku = np.einsum("pj,pj->p", grad_ku, n)
        dn_taup = np.einsum("pj,pj->p", grad_taup, n)
        dens_A += np.where(on_N, kappa * ku + dn_ku, 0.0)
        dens_B = np.where(on_N, -(kappa * taup + dn_taup), 0.0)

    dens_C = np.zeros(len(pts))
    on_C = labels == CONTACT
    if np.any(on_C) and problem.model != "none":
        eps = problem.config.eps
        nr = problem.foundation.inward_normal(pts)
        dn = problem.foundation.normal_jacobian(pts)
        gap = problem.foundation.gap(pts)
        that = np.stack([-nr[:, 1], nr[:, 0]], axis=1)
        un = np.einsum("pc,pc->p", uv, nr)
        ut = np.einsum("pc,pc->p", uv, that)
        pen = un - gap
        R_n = proj.pmax(pen)
        H = proj.heaviside(pen)
        p_n = np.einsum("pc,pc->p", pv, nr)
        p_ts = np.einsum("pc,pc->p", pv, that)
        gt = problem.friction.g_t(pts) if problem.model == "tresca" else np.zeros(len(pts))
        alpha = eps * gt
        d_alpha, d_z, _ = proj.dq_branches(alpha, ut, problem.config.tie_tol)
        q_t = np.where(alpha > 0.0, np.clip(ut, -alpha, alpha), 0.0)
        # grad(pen) = grad(u.n) + n  (since grad gap = -n)
        grad_un = np.einsum("pcj,pc->pj", gu, nr) + np.einsum("pij,pi->pj", dn, uv)
        grad_pen = grad_un + nr
        grad_pn = np.einsum("pcj,pc->pj", gp, nr) + np.einsum("pij,pi->pj", dn, pv)
        grad_Rnpn = H[:, None] * grad_pen * p_n[:, None] + R_n[:, None] * grad_pn
        # tangential: grad t = Rot grad n
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        dthat = np.einsum("ik,pkj->pij", rot, dn)
        grad_ut = np.einsum("pcj,pc->pj", gu, that) + np.einsum("pij,pi->pj", dthat, uv)
        grad_gt = problem.friction.grad_g_t(pts)
        grad_qt = d_z[:, None] * grad_ut + d_alpha[:, None] * eps * grad_gt
        grad_pts = np.einsum("pcj,pc->pj", gp, that) + np.einsum("pij,pi->pj", dthat, pv)
        grad_Stpt = grad_qt * p_ts[:, None] + q_t[:, None] * grad_pts
        dn_term = np.einsum("pj,pj->p", grad_Rnpn + grad_Stpt, n)
        val = (kappa * (R_n * p_n + q_t * p_ts) + dn_term) / eps
        dens_C = np.where(on_C, val, 0.0)

    return BoundaryDensities(pts, w, dens_A, dens_B, dens_C)


# -- H1-regularized descent velocity -----------------------------------------------

class GridH1Regularizer:
    """(reg^2 grad, grad) + (., .) solver on the level-set grid (Q1 elements)."""

    def __init__(self, grid, reg_length: float):
        self.grid = grid
        self.reg_length = float(reg_length)
        K, M = self._assemble(grid)
        self._op = (self.reg_length**2 * K + M).tocsc()
        self._lu = spla.splu(self._op)
        self.K, self.M = K, M

    @staticmethod
    def _assemble(grid):
        # reference Q1 matrices by 2x2 Gauss quadrature
        gp = np.array([-1, 1]) / np.sqrt(3.0)
        dx, dy = grid.dx, grid.dy
        Ke = np.zeros((4, 4))
        Me = np.zeros((4, 4))
        for xi in gp:
            for et in gp:
                Nv = 0.25 * np.array([(1 - xi) * (1 - et), (1 + xi) * (1 - et),
                                      (1 - xi) * (1 + et), (1 + xi) * (1 + et)])
                dNx = 0.25 * np.array([-(1 - et), (1 - et), -(1 + et), (1 + et)]) * 2 / dx
                dNy = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 - xi), (1 + xi)]) * 2 / dy
                jac = dx * dy / 4.0
                Ke += jac * (np.outer(dNx, dNx) + np.outer(dNy, dNy))
                Me += jac * np.outer(Nv, Nv)
        nxn = grid.ny + 1
        cells = []
        for i in range(grid.nx):
            for j in range(grid.ny):
                base = i * nxn + j
                cells.append([base, base + nxn, base + 1, base + nxn + 1])
        cells = np.array(cells, dtype=np.int64)
        rows = np.repeat(cells, 4, axis=1).ravel()
        cols = np.tile(cells, (1, 4)).ravel()
        nn = (grid.nx + 1) * (grid.ny + 1)
        data_K = np.tile(Ke.ravel(), len(cells))
        data_M = np.tile(Me.ravel(), len(cells))
        K = sp.coo_matrix((data_K, (rows, cols)), shape=(nn, nn)).tocsr()
        M = sp.coo_matrix((data_M, (rows, cols)), shape=(nn, nn)).tocsr()
        return K, M

    def solve(self, G):
        """Descent speed theta with dJ[theta n] = -(reg^2 |grad th|^2 + |th|^2)."""
        theta = self._lu.solve(-np.asarray(G, dtype=float))
        return theta.reshape(self.grid.shape)
