"""Penalized Tresca contact solver (semismooth Newton).

Solves: find u with

    a(u, v) + (1/eps) <pmax(u_n - g), v_n>_GC + (1/eps) <q(eps*F*s, u_t), v_t>_GC = L(v)

for all admissible v, where n is the rigid foundation's inward normal, g the
oriented-distance gap, and F*s the Tresca friction threshold.  The normal and
tangential contact stresses follow as -(1/eps) pmax(u_n - g) and
-(1/eps) q(eps*F*s, u_t).

The generalized Jacobian reuses the same branch structure (Heaviside for the
normal term, the ball-projection Jacobian for the tangential one), which is
symmetric positive definite after Dirichlet elimination; the resulting
semismooth Newton iteration typically settles the active set in a handful of
steps since the system is piecewise linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import projections as proj
from .fem import (FeSpace, Field, LoadData, MaterialModel, assemble_elasticity,
                  assemble_load, edge_trace, gauss_segment)
from .mesh import CONTACT, DIRICHLET

__all__ = [
    "FrictionModel", "SolverConfig", "ContactState", "BiactiveDiagnostics",
    "ContactProblem", "biactive_measure", "NewtonError",
]

MODELS = ("none", "sliding", "tresca")


class NewtonError(RuntimeError):
    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = history or []


@dataclass
class FrictionModel:
    """Friction coefficient and Tresca threshold, combined as g_t = coeff * s.

    Both entries are constants or callables ``pts -> (n,)``;
    ``grad_threshold_product`` optionally supplies grad(coeff * s) as a
    callable ``pts -> (n, 2)`` (zero for constant data).
    """

    coefficient: object = 0.2
    threshold: object = 1e-2
    grad_threshold_product: object = None

    def g_t(self, pts):
        c = self._eval(self.coefficient, pts)
        s = self._eval(self.threshold, pts)
        if np.any(c <= 0.0):
            raise ValueError("friction coefficient must be positive")
        if np.any(s < 0.0):
            raise ValueError("Tresca threshold must be nonnegative")
        return c * s

    def grad_g_t(self, pts):
        if self.grad_threshold_product is None:
            return np.zeros((len(pts), 2))
        return np.asarray(self.grad_threshold_product(pts), dtype=float).reshape(len(pts), 2)

    @staticmethod
    def _eval(spec, pts):
        if callable(spec):
            return np.asarray(spec(pts), dtype=float).reshape(len(pts))
        return np.full(len(pts), float(spec))


@dataclass
class SolverConfig:
    """Penalty parameter and Newton controls."""

    eps: float = 1e-6
    rtol: float = 1e-10
    max_iters: int = 30
    max_backtracks: int = 8
    tie_tol: float = 1e-12

    def __post_init__(self):
        if self.eps <= 0.0 or self.rtol <= 0.0:
            raise ValueError("penalty parameter and tolerance must be positive")


@dataclass
class ContactState:
    """Converged displacement plus per-quadrature-point contact records."""

    u: Field
    x: np.ndarray            # (npts, 2) quadrature points on Gamma_C
    w: np.ndarray            # (npts,) arc-length weights
    gap: np.ndarray
    penetration: np.ndarray  # u_n - g
    u_t: np.ndarray
    sigma_nn: np.ndarray
    sigma_nt: np.ndarray
    g_t: np.ndarray          # friction bound F*s at the points
    in_contact: np.ndarray
    sticking: np.ndarray
    newton_iters: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = True

    def classification(self):
        """String labels per point: separated / stick / slide."""
        out = np.where(self.in_contact,
                       np.where(self.sticking, "stick", "slide"), "separated")
        return out


@dataclass
class BiactiveDiagnostics:
    """Arc-length measures of the weak-contact and weak-sticking sets."""

    normal_measure: float
    tangential_measure: float
    normal_fraction: float
    tangential_fraction: float
    warn_normal_measure: float
    warn_tangential_measure: float
    contact_length: float

    @property
    def clean(self) -> bool:
        return self.warn_normal_measure == 0.0 and self.warn_tangential_measure == 0.0


class _WoodburySolver:
    """Sparse base factorization plus accumulated rank-one updates.

    Solves (B + sum_j c_j v_j v_j^T) x = r through the capacitance matrix
    D^{-1} + V^T B^{-1} V; updates append one backsolve each.
    """

    def __init__(self, B):
        self.lu = spla.splu(B.tocsc())
        self.V = []
        self.Z = []
        self.M = np.zeros((0, 0))

    @property
    def rank(self):
        return len(self.V)

    def add_update(self, v, c):
        z = self.lu.solve(v)
        k = self.rank
        M = np.zeros((k + 1, k + 1))
        M[:k, :k] = self.M
        for j in range(k):
            M[j, k] = M[k, j] = self.V[j] @ z
        M[k, k] = 1.0 / c + v @ z
        self.M = M
        self.V.append(v)
        self.Z.append(z)

    def solve(self, r):
        x0 = self.lu.solve(r)
        if not self.V:
            return x0
        rhs = np.array([vj @ x0 for vj in self.V])
        y = np.linalg.solve(self.M, rhs)
        return x0 - np.column_stack(self.Z) @ y


class ContactProblem:
    """Assembled penalized contact problem on a fixed mesh.

    ``model`` selects the physics: ``"none"`` drops every contact term (pure
    elasticity), ``"sliding"`` keeps only the normal penalty, ``"tresca"``
    keeps friction as well.
    """

    def __init__(self, space: FeSpace, material: MaterialModel, loads: LoadData,
                 friction: FrictionModel, foundation, config: SolverConfig,
                 model: str = "tresca", extra_fixed=None):
        if model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        self.space = space
        self.material = material
        self.loads = loads
        self.friction = friction
        self.foundation = foundation
        self.config = config
        self.model = model

        self.K = assemble_elasticity(space, material)
        self.F = assemble_load(space, loads)
        self.mask = space.dirichlet_mask((DIRICHLET,))
        if extra_fixed is not None:
            self.mask = self.mask | np.asarray(extra_fixed, dtype=bool)
        self._setup_contact_points()
        self._eliminate_base()

    # -- assembly ---------------------------------------------------------

    def _setup_contact_points(self):
        space = self.space
        mesh = space.mesh
        facets = mesh.facets_with_label(CONTACT) if self.model != "none" else np.array([], int)
        self.contact_facets = facets
        nq = 5
        t, wq = gauss_segment(nq)
        self.trace = edge_trace(space.degree, t)  # (nq, nd)
        nd = self.trace.shape[1]
        nf = len(facets)
        self.facet_dofs = np.zeros((nf, nd), dtype=np.int64)
        self.xq = np.zeros((nf, nq, 2))
        self.wq = np.zeros((nf, nq))
        for k, fi in enumerate(facets):
            a, b = mesh.facets[fi]
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            self.facet_dofs[k] = space.facet_dofs(fi)
            self.xq[k] = pa[None, :] + t[:, None] * (pb - pa)[None, :]
            self.wq[k] = wq * np.linalg.norm(pb - pa)
        pts = self.xq.reshape(-1, 2)
        if nf:
            self.gap_q = self.foundation.gap(pts)
            self.nrig_q = self.foundation.inward_normal(pts)
            self.dnrig_q = self.foundation.normal_jacobian(pts)
            self.gt_q = self.friction.g_t(pts)
            if self.model == "sliding":
                self.gt_q = np.zeros_like(self.gt_q)
            self.grad_gt_q = self.friction.grad_g_t(pts)
        else:
            self.gap_q = np.zeros(0)
            self.nrig_q = np.zeros((0, 2))
            self.dnrig_q = np.zeros((0, 2, 2))
            self.gt_q = np.zeros(0)
            self.grad_gt_q = np.zeros((0, 2))
        self.tang_q = np.stack([-self.nrig_q[:, 1], self.nrig_q[:, 0]], axis=1)
        self.wq_flat = self.wq.reshape(-1)
        self.alpha_q = self.config.eps * self.gt_q

    def _eliminate_base(self):
        mask = self.mask
        keep = sp.diags((~mask).astype(float))
        self.K_elim = (keep @ self.K @ keep + sp.diags(mask.astype(float))).tocsr()
        self.F_elim = np.where(mask, 0.0, self.F)
        self.load_norm = np.linalg.norm(self.F_elim)

    def traces_at_points(self, u_vec):
        """u, u_n, u_t at all contact quadrature points."""
        if len(self.contact_facets) == 0:
            z = np.zeros(0)
            return np.zeros((0, 2)), z, z
        vals = u_vec.reshape(-1, 2)[self.facet_dofs]        # (nf, nd, 2)
        uq = np.einsum("qd,fdc->fqc", self.trace, vals).reshape(-1, 2)
        un = np.einsum("pc,pc->p", uq, self.nrig_q)
        ut = np.einsum("pc,pc->p", uq, self.tang_q)
        return uq, un, ut

    def residual(self, u_vec, eps=None, gt_scale=1.0):
        """Eliminated residual vector of the penalized problem."""
        eps = self.config.eps if eps is None else eps
        R = self.K @ u_vec - self.F
        if len(self.contact_facets):
            alpha = eps * gt_scale * self.gt_q
            _, un, ut = self.traces_at_points(u_vec)
            pen = un - self.gap_q
            coef_n = proj.pmax(pen) / eps
            if self.model == "tresca":
                act = alpha > 0.0
                coef_t = np.where(act, np.clip(ut, -alpha, alpha), 0.0) / eps
            else:
                coef_t = np.zeros_like(un)
            load = self.wq_flat[:, None] * (coef_n[:, None] * self.nrig_q
                                            + coef_t[:, None] * self.tang_q)
            nd = self.trace.shape[1]
            nq = self.trace.shape[0]
            loadf = load.reshape(len(self.contact_facets), nq, 2)
            contrib = np.einsum("qd,fqc->fdc", self.trace, loadf)
            np.add.at(R, 2 * self.facet_dofs, contrib[:, :, 0])
            np.add.at(R, 2 * self.facet_dofs + 1, contrib[:, :, 1])
        R[self.mask] = u_vec[self.mask]
        return R

    def jacobian(self, u_vec, eps=None, stick_hint=None, stick_extra=None,
                 gt_scale=1.0):
        """Generalized Jacobian b_eps at u, eliminated; symmetric.

        ``stick_hint`` optionally overrides the tangential branch selection
        (True = sticking); ``stick_extra`` forces the stick branch on top of
        the pointwise selection.  Any bounded branch choice yields a valid
        semismooth step; warm starts across penalty stages use the previous
        stage's force-based stick set (scale free, where the raw displacement
        test is not), and points whose tangential sign oscillates between
        iterates are re-stiffened, which removes the stick/slide ping-pong of
        friction-dominated points.
        """
        eps = self.config.eps if eps is None else eps
        B = self.K_elim.copy()
        if len(self.contact_facets):
            alpha = eps * gt_scale * self.gt_q
            _, un, ut = self.traces_at_points(u_vec)
            pen = un - self.gap_q
            Hq = proj.heaviside(pen)
            if stick_hint is not None:
                dz = np.where(alpha > 0.0, stick_hint.astype(float), 0.0)
            else:
                _, dz, _ = proj.dq_branches(alpha, ut, self.config.tie_tol)
            if stick_extra is not None:
                dz = np.maximum(dz, np.where(alpha > 0.0,
                                             stick_extra.astype(float), 0.0))
            if self.model != "tresca":
                dz = np.zeros_like(dz)
            coef_n = self.wq_flat * Hq / eps
            coef_t = self.wq_flat * dz / eps
            nn = np.einsum("p,pc,pe->pce", coef_n, self.nrig_q, self.nrig_q)
            tt = np.einsum("p,pc,pe->pce", coef_t, self.tang_q, self.tang_q)
            P = (nn + tt).reshape(len(self.contact_facets), -1, 2, 2)
            # block over facet dofs: M[a c, b e] = sum_q N_qa N_qb P_q[c, e]
            M = np.einsum("qa,qb,fqce->fabce", self.trace, self.trace, P)
            nd = self.trace.shape[1]
            vec_dofs = np.empty((len(self.contact_facets), 2 * nd), dtype=np.int64)
            vec_dofs[:, 0::2] = 2 * self.facet_dofs
            vec_dofs[:, 1::2] = 2 * self.facet_dofs + 1
            Mfull = M.transpose(0, 1, 3, 2, 4).reshape(len(self.contact_facets),
                                                       2 * nd, 2 * nd)
            rows = np.repeat(vec_dofs, 2 * nd, axis=1).ravel()
            cols = np.tile(vec_dofs, (1, 2 * nd)).ravel()
            C = sp.coo_matrix((Mfull.ravel(), (rows, cols)), shape=B.shape).tocsr()
            keep = sp.diags((~self.mask).astype(float))
            B = B + keep @ C @ keep
        return B

    def energy(self, u_vec, eps=None, gt_scale=1.0):
        """Penalized total energy (elastic + load + penalty + friction envelope).

        Strictly convex and continuously differentiable; its gradient is the
        residual, which makes it the line-search merit function.
        """
        eps = self.config.eps if eps is None else eps
        e = 0.5 * u_vec @ (self.K @ u_vec) - self.F @ u_vec
        if len(self.contact_facets):
            _, un, ut = self.traces_at_points(u_vec)
            pen = proj.pmax(un - self.gap_q)
            e += np.sum(self.wq_flat * pen**2) / (2 * eps)
            if self.model == "tresca":
                a = eps * gt_scale * self.gt_q
                inner = 0.5 * ut**2
                outer = a * np.abs(ut) - 0.5 * a**2
                e += np.sum(self.wq_flat * np.where(np.abs(ut) <= a, inner, outer)) \
                    / eps
        return e

    # -- solve -------------------------------------------------------------

    def solve(self, initial=None) -> ContactState:
        """Solve the penalized problem; returns the converged contact state.

        Without friction the damped semismooth Newton iteration (with a
        penalty ladder on cold starts) settles the contact set in a handful
        of steps.  The Tresca model instead goes through the exact
        branch-assignment machinery: warm starts classify the branches from
        the supplied displacement and repair them finitely; cold starts
        detect the branch sets globally through the joint Moreau dual.
        """
        cfg = self.config
        total_iters = 0
        history = []
        n = 2 * self.space.ndof

        # unloaded problems converge at zero without any factorization
        R0 = self.residual(np.zeros(n))
        if np.linalg.norm(R0) <= cfg.rtol * max(self.load_norm, 1.0):
            state = self._make_state(np.zeros(n), 0, [0.0])
            state._jacobian_lu = None
            return state

        tresca = self.model == "tresca" and len(self.contact_facets) > 0
        u = None
        if initial is not None:
            u0 = np.asarray(initial, dtype=float).copy()
            u0[self.mask] = 0.0
            try:
                if tresca:
                    u, its = self._tresca_warm(u0, cfg.eps)
                else:
                    u, its, history = self._newton(u0, cfg.eps)
                total_iters = its
            except NewtonError:
                u = None
        if u is None:
            if tresca:
                u, total_iters = self._tresca_dual(np.zeros(n), cfg.eps)
            else:
                stages = [cfg.eps]
                while stages[-1] < 1e-2 / 11 and len(self.contact_facets):
                    stages.append(stages[-1] * 10.0)
                u = np.zeros(n)
                for eps in reversed(stages):
                    u, its, h = self._newton(u, eps)
                    total_iters += its
                    history.extend(h)
        state = self._make_state(u, total_iters, history)
        # factor b_eps at the final iterate: adjoint and material solves reuse it
        state._jacobian_lu = spla.splu(self.jacobian(u).tocsc())
        return state

    def _tresca_warm(self, u0, eps):
        """Warm Tresca solve: classify branches from u0, then exact repair."""
        N = self._normal_trace_matrix()
        T = self._tangential_trace_matrix()
        bound = self.gt_q
        act = bound > 0.0
        pen = N @ u0 - self.gap_q
        t = T @ u0
        active_n = pen > 0.0
        stick = act & (np.abs(t) <= eps * bound)
        clamp_sign = np.where(act & ~stick, np.sign(t), 0.0)
        clamp_sign[act & ~stick & (clamp_sign == 0.0)] = 1.0
        return self._branch_repair(N, T, active_n, stick, clamp_sign, eps, cap=60)

    def _tangential_trace_matrix(self):
        """Sparse map u -> tangential traces at all contact quadrature points."""
        nf = len(self.contact_facets)
        nq, nd = self.trace.shape
        m = nf * nq
        rows = np.repeat(np.arange(m), 2 * nd)
        dof_x = np.repeat(2 * self.facet_dofs[:, None, :], nq, axis=1)
        dof_y = dof_x + 1
        cols = np.stack([dof_x, dof_y], axis=-1).reshape(nf, nq, 2 * nd)
        tang = self.tang_q.reshape(nf, nq, 2)
        # (N_a tx, N_a ty) pairs, matching the interleaved column layout
        vals = np.einsum("qd,fqc->fqdc", self.trace, tang).reshape(nf, nq, 2 * nd)
        T = sp.coo_matrix((vals.ravel(), (rows, cols.ravel())),
                          shape=(m, 2 * self.space.ndof)).tocsr()
        keep = sp.diags((~self.mask).astype(float))
        return T @ keep

    def _normal_trace_matrix(self):
        """Sparse map u -> normal traces at all contact quadrature points."""
        nf = len(self.contact_facets)
        nq, nd = self.trace.shape
        m = nf * nq
        rows = np.repeat(np.arange(m), 2 * nd)
        dof_x = np.repeat(2 * self.facet_dofs[:, None, :], nq, axis=1)
        cols = np.stack([dof_x, dof_x + 1], axis=-1).reshape(nf, nq, 2 * nd)
        nrm = self.nrig_q.reshape(nf, nq, 2)
        vals = np.einsum("qd,fqc->fqdc", self.trace, nrm).reshape(nf, nq, 2 * nd)
        N = sp.coo_matrix((vals.ravel(), (rows, cols.ravel())),
                          shape=(m, 2 * self.space.ndof)).tocsr()
        keep = sp.diags((~self.mask).astype(float))
        return N @ keep

    def _tresca_dual(self, u, eps):
        """Exact Tresca solve through the joint Moreau dual.

        Both penalized laws are Moreau envelopes, so the problem has a
        strongly concave dual in the force densities: lambda_n >= 0 for the
        normal pressure, |lambda_t| <= Fs for friction, with the fixed
        elastic stiffness underneath.  A bound-constrained quasi-Newton
        solve detects all branch sets globally (no alternating active-set
        thrashing); the piecewise-linear system is then re-solved exactly on
        the detected branches with single-point repair, which cannot cycle
        because each flip strictly decreases the convex energy.
        """
        from scipy.optimize import minimize

        cfg = self.config
        ref = max(self.load_norm, 1e-300)
        T = self._tangential_trace_matrix()
        N = self._normal_trace_matrix()
        m = T.shape[0]
        bound = self.gt_q.copy()
        act = bound > 0.0
        w = self.wq_flat
        try:
            lu = spla.splu(self.K_elim.tocsc())
        except RuntimeError as exc:
            raise NewtonError(f"elastic stiffness is singular: {exc}", best=u) from exc
        base = lu.solve(self.F_elim)
        colsN = lu.solve(N.toarray().T)
        colsT = lu.solve(T.toarray().T)
        C = np.concatenate([N.toarray(), T.toarray()], axis=0)
        cols = np.concatenate([colsN, colsT], axis=1)
        S = C @ cols                                  # 2m x 2m compliance, PSD
        b = np.concatenate([N @ base - self.gap_q, T @ base])
        ww = np.concatenate([w, w])
        P = (S * ww[None, :]) * ww[:, None] + eps * np.diag(ww)
        q = ww * b
        lo = np.concatenate([np.zeros(m), -bound])
        hi = np.concatenate([np.full(m, np.inf), bound])
        res = minimize(lambda l: 0.5 * l @ P @ l - q @ l, np.zeros(2 * m),
                       jac=lambda l: P @ l - q, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)),
                       options={"maxiter": 5000, "ftol": 1e-18, "gtol": 1e-16})
        lam_n, lam_t = res.x[:m], res.x[m:]
        scale_n = max(lam_n.max(), 1e-30)
        active_n = lam_n > 1e-3 * scale_n
        stick = act & (np.abs(lam_t) < (1.0 - 1e-3) * bound)
        clamp_sign = np.where(act & ~stick, np.sign(lam_t), 0.0)
        clamp_sign[act & ~stick & (clamp_sign == 0.0)] = 1.0
        return self._branch_repair(N, T, active_n, stick, clamp_sign, eps, cap=200)

    def _branch_repair(self, N, T, active_n, stick, clamp_sign, eps, cap=200):
        """Exact branch solves with violation-driven set repair.

        Flips every violated assignment while the violation count decreases
        (Newton-like), falling back to flipping only the worst violator,
        which strictly decreases the convex energy and thus terminates.
        Each flip is a rank-one change of the branch matrix, applied through
        a Woodbury capacitance update on one base factorization; the base is
        refreshed every 40 accumulated updates for accuracy.
        """
        cfg = self.config
        ref = max(self.load_norm, 1e-300)
        bound = self.gt_q
        act = bound > 0.0
        w = self.wq_flat
        best = (np.inf, None)
        prev_nviol = np.inf
        solver = None
        k = 0
        while k < cap:
            if solver is None or solver.rank > 40:
                solver = _WoodburySolver(self._branch_matrix(N, T, active_n, stick, eps))
            rhs = self._branch_rhs(N, T, active_n, clamp_sign, eps)
            u_try = solver.solve(np.where(self.mask, 0.0, rhs))
            k += 1
            pen = N @ u_try - self.gap_q
            t = T @ u_try
            viol_non = ~active_n & (pen > 0.0)
            viol_act = active_n & (pen < 0.0)
            viol_stick = act & stick & (np.abs(t) > eps * bound * (1 + 1e-9))
            viol_clamp = act & ~stick & (clamp_sign * t < eps * bound * (1 - 1e-9))
            viol = viol_non | viol_act | viol_stick | viol_clamp
            nviol = int(np.sum(viol))
            R = self.residual(u_try, eps)
            rnorm = np.linalg.norm(R)
            if rnorm < best[0]:
                best = (rnorm, u_try.copy())
            if rnorm <= cfg.rtol * ref:
                return u_try, k
            if nviol == 0:
                # consistent branches but residual above tolerance: the
                # accumulated low-rank updates lost accuracy; rebase
                if solver.rank == 0:
                    break
                solver = None
                continue
            if nviol < prev_nviol:
                flip_set = viol
            else:
                score = np.where(viol_non | viol_act, np.abs(pen) / eps, 0.0)
                score = np.maximum(score, np.where(
                    viol_stick, np.abs(t) / eps - bound, 0.0))
                score = np.maximum(score, np.where(
                    viol_clamp, bound - clamp_sign * t / eps, 0.0))
                flip_set = np.zeros_like(viol)
                flip_set[int(np.argmax(score))] = True
            prev_nviol = nviol
            flip_n = flip_set & (viol_non | viol_act)
            for q in np.nonzero(flip_n)[0]:
                sign = -1.0 if active_n[q] else 1.0
                solver.add_update(N[q].toarray().ravel(), sign * w[q] / eps)
            active_n[flip_n] = ~active_n[flip_n]
            to_slide = flip_set & viol_stick
            for q in np.nonzero(to_slide)[0]:
                solver.add_update(T[q].toarray().ravel(), -w[q] / eps)
            stick[to_slide] = False
            clamp_sign[to_slide] = np.sign(t[to_slide])
            to_stick = flip_set & viol_clamp
            for q in np.nonzero(to_stick)[0]:
                solver.add_update(T[q].toarray().ravel(), w[q] / eps)
            stick[to_stick] = True
            clamp_sign[to_stick] = 0.0
        raise NewtonError(
            f"branch repair did not reach tolerance "
            f"(relative residual {best[0] / ref:.3e})", best=best[1])

    def _branch_matrix(self, N, T, active_n, stick, eps):
        w = self.wq_flat
        B = self.K_elim
        idx_n = np.nonzero(active_n)[0]
        if len(idx_n):
            Na = N[idx_n]
            B = B + (Na.T @ sp.diags(w[idx_n] / eps) @ Na).tocsr()
        idx_s = np.nonzero(stick)[0]
        if len(idx_s):
            Ts = T[idx_s]
            B = B + (Ts.T @ sp.diags(w[idx_s] / eps) @ Ts).tocsr()
        return B

    def _branch_rhs(self, N, T, active_n, clamp_sign, eps):
        w = self.wq_flat
        rhs = self.F_elim.copy()
        idx_n = np.nonzero(active_n)[0]
        if len(idx_n):
            rhs += N[idx_n].T @ (w[idx_n] * self.gap_q[idx_n] / eps)
        clamped = clamp_sign != 0
        if np.any(clamped):
            load = np.zeros(T.shape[0])
            load[clamped] = w[clamped] * self.gt_q[clamped] * clamp_sign[clamped]
            rhs -= T.T @ load
        return rhs

    def _newton(self, u, eps, stick_hint=None, gt_scale=1.0):
        """Damped semismooth Newton at fixed penalty and friction scale.

        ``stick_hint`` applies to the first Jacobian only; afterwards the
        branch selection follows the current iterate, with points whose
        tangential sign flipped in the last step temporarily stiffened.
        """
        cfg = self.config
        ref = max(self.load_norm, 1e-300)
        R = self.residual(u, eps, gt_scale)
        rnorm = np.linalg.norm(R)
        history = [rnorm]
        it = 0
        ut_prev = None
        flip = None
        while rnorm > cfg.rtol * ref and it < cfg.max_iters:
            B = self.jacobian(u, eps, stick_hint=stick_hint if it == 0 else None,
                              stick_extra=flip, gt_scale=gt_scale)
            try:
                lu = spla.splu(B.tocsc())
            except RuntimeError as exc:
                raise NewtonError(f"singular generalized Jacobian: {exc}",
                                  best=u, history=history) from exc
            delta = lu.solve(-R)
            omega = 1.0
            accepted = None
            for _ in range(cfg.max_backtracks + 1):
                trial = u + omega * delta
                Rt = self.residual(trial, eps, gt_scale)
                tnorm = np.linalg.norm(Rt)
                if tnorm < rnorm or tnorm <= cfg.rtol * ref:
                    accepted = (trial, Rt, tnorm)
                    break
                omega *= 0.5
            if accepted is None:
                # Residual backtracking found no decrease (the active set is
                # flipping).  The Newton direction is still a descent
                # direction for the strictly convex energy whose gradient is
                # the residual, so Armijo on the energy guarantees progress
                # and rules out active-set cycling.
                E0 = self.energy(u, eps, gt_scale)
                slope = float(R @ delta)
                omega = 1.0
                for _ in range(40):
                    trial = u + omega * delta
                    if self.energy(trial, eps, gt_scale) <= E0 + 1e-4 * omega * slope:
                        break
                    omega *= 0.5
                Rt = self.residual(trial, eps, gt_scale)
                accepted = (trial, Rt, np.linalg.norm(Rt))
            u, R, rnorm = accepted
            if len(self.contact_facets) and self.model == "tresca":
                _, _, ut = self.traces_at_points(u)
                if ut_prev is not None:
                    flip = (ut * ut_prev) < 0.0
                ut_prev = ut
            history.append(rnorm)
            it += 1
        if rnorm > cfg.rtol * ref:
            raise NewtonError(
                f"Newton did not converge in {cfg.max_iters} iterations "
                f"(relative residual {rnorm / ref:.3e})", best=u, history=history)
        return u, it, history

    def _make_state(self, u_vec, iters, history) -> ContactState:
        _, un, ut = self.traces_at_points(u_vec)
        pen = un - self.gap_q
        sig_nn = -proj.pmax(pen) / self.config.eps
        if self.model == "tresca":
            qv = np.where(self.alpha_q > 0.0,
                          np.clip(ut, -self.alpha_q, self.alpha_q), 0.0)
        else:
            qv = np.zeros_like(ut)
        sig_nt = -qv / self.config.eps
        in_contact = pen >= 0.0
        sticking = np.abs(ut) <= self.alpha_q
        return ContactState(
            u=Field(self.space, u_vec), x=self.xq.reshape(-1, 2), w=self.wq_flat,
            gap=self.gap_q, penetration=pen, u_t=ut,
            sigma_nn=sig_nn, sigma_nt=sig_nt, g_t=self.gt_q,
            in_contact=in_contact, sticking=sticking,
            newton_iters=iters, residual_history=history, converged=True)

    def frozen_jacobian_solver(self, state: ContactState):
        """LU factorization of b_eps at the converged state (cached)."""
        lu = getattr(state, "_jacobian_lu", None)
        if lu is None:
            lu = spla.splu(self.jacobian(state.u.values).tocsc())
            state._jacobian_lu = lu
        return lu


def biactive_measure(problem: ContactProblem, state: ContactState,
                     tol_bi: float = 1e-12, warn_band: float = 1e-6) -> BiactiveDiagnostics:
    """Arc-length measure of the biactive (weak contact / weak stick) sets.

    Exact ties are detected with the absolute tolerance ``tol_bi`` on the
    defining quantities u_n - g_n and |u_t| - eps*F*s.  The warning band is
    relative to the state's own scale of each quantity: penalty-converged
    states have penetrations of order eps * sigma, so an absolute band would
    flag every contact point rather than the near-branch-flip ones whose
    derivative is only directional.
    """
    w = state.w
    total = float(np.sum(w))
    pen = state.penetration
    near_n = np.abs(pen) <= tol_bi
    meas_n = float(np.sum(w[near_n]))
    act = problem.alpha_q > 0.0
    tang_gap = np.abs(np.abs(state.u_t) - problem.alpha_q)
    near_t = act & (tang_gap <= tol_bi)
    meas_t = float(np.sum(w[near_t]))
    scale_n = max(np.abs(pen).max(initial=0.0), 1e-300)
    scale_t = max(problem.alpha_q.max(initial=0.0),
                  np.abs(state.u_t).max(initial=0.0), 1e-300)
    warn_n = float(np.sum(w[np.abs(pen) <= warn_band * scale_n]))
    warn_t = float(np.sum(w[act & (tang_gap <= warn_band * scale_t)]))
    frac = (lambda m: m / total if total > 0 else 0.0)
    return BiactiveDiagnostics(meas_n, meas_t, frac(meas_n), frac(meas_t),
                               warn_n, warn_t, total)
