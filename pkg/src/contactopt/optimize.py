"""Gradient-descent shape optimization loop.

Each iteration: solve the contact problem on the current cut mesh, solve the
adjoint, build the distributed shape gradient, regularize it into a normal
speed on the level-set grid, advect the level set over a backtracked
pseudo-time horizon until the objective decreases, and re-cut the mesh.
The accepted objective sequence is strictly decreasing by construction; the
loop halts on stagnation, inadmissible shapes, or the iteration cap.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .contact import ContactProblem, FrictionModel, NewtonError, SolverConfig, biactive_measure
from .fem import FeSpace, LoadData, MaterialModel
from .foundation import RigidFoundation
from .levelset import (BoundaryConfig, Grid, InadmissibleShapeError, LevelSetField,
                       advect, cut_mesh, init_signed_distance, reinitialize)
from .mesh import NEUMANN, rect_mesh
from .sensitivity import (GridH1Regularizer, NormalVelocityField, ObjectiveConfig,
                          build_shape_gradient, objective, solve_adjoint)
from . import vtkio

__all__ = ["OptimizationConfig", "IterationRecord", "OptimizationResult",
           "run", "evaluate_only", "write_history_csv", "HISTORY_HEADER"]

HISTORY_HEADER = ["k", "J", "compliance", "volume", "grad_norm", "T_accepted",
                  "newton_iters", "biactive_normal", "biactive_tangential", "wall_time"]

_SHAPE_KINDS = {"full", "holes"}


@dataclass
class OptimizationConfig:
    """Full problem + algorithm description; mirrors the JSON config schema."""

    model: str = "tresca"
    domain: tuple = (0.0, 0.0, 2.0, 1.0)
    levelset_grid: tuple = (160, 80)
    fem_grid: tuple = (50, 25)
    degree: int = 2
    material: dict = field(default_factory=lambda: {"E": 1.0, "nu": 0.3})
    body_force: tuple = (0.0, 0.0)
    traction: tuple = (0.0, -0.01)
    neumann_side: str = "right"
    neumann_span: tuple = (0.4, 0.6)
    dirichlet_side: str = "left"
    dirichlet_span: tuple | None = None
    foundation: dict = field(default_factory=lambda: {
        "kind": "disk", "center": (1.0, -8.0), "radius": 8.0})
    friction_coefficient: float = 0.2
    tresca_threshold: float = 1e-2
    compliance_weight: float = 15.0
    volume_weight: float = 0.01
    penalty_eps: float = 1e-6
    contact_distance: float | None = None
    initial_shape: dict = field(default_factory=lambda: {"kind": "full"})
    max_iters: int = 300
    cfl: float = 1.0
    line_search_max: int = 8
    stagnation_window: int = 10
    stagnation_rtol: float = 1e-4
    reinit_every: int = 5
    regularization_length: float | None = None
    protect_neumann_radius: float | None = None
    protect_dirichlet_radius: float | None = None
    newton_rtol: float = 1e-10
    newton_max_iters: int = 30
    tie_tol: float = 1e-12
    seed: int = 42

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizationConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: _untuple(v) for k, v in data.items()})
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "OptimizationConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def validate(self):
        if self.model not in ("none", "sliding", "tresca"):
            raise ValueError(f"unknown model {self.model!r}")
        if set(self.material) - {"E", "nu"}:
            raise ValueError("material keys are E and nu")
        fkeys = set(self.foundation) - {"kind", "center", "radius", "normal",
                                        "offset", "path", "band"}
        if fkeys:
            raise ValueError(f"unknown foundation keys: {sorted(fkeys)}")
        if self.initial_shape.get("kind", "full") not in _SHAPE_KINDS:
            raise ValueError(f"unknown initial shape kind")
        if self.penalty_eps <= 0:
            raise ValueError("penalty_eps must be positive")
        if not 0 < self.cfl:
            raise ValueError("cfl must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")

    # -- derived objects ----------------------------------------------------

    def build_grid(self) -> Grid:
        return Grid(*self.levelset_grid, bounds=self.domain)

    def build_foundation(self) -> RigidFoundation | None:
        if self.model == "none":
            return None
        f = self.foundation
        kind = f.get("kind", "disk")
        if kind == "disk":
            return RigidFoundation.disk(f["center"], f["radius"])
        if kind == "half_plane":
            return RigidFoundation.half_plane(f.get("normal", (0.0, 1.0)),
                                              f.get("offset", 0.0))
        if kind == "sdf_file":
            return RigidFoundation.from_grid_file(f["path"], band=f["band"])
        raise ValueError(f"unknown foundation kind {kind!r}")

    def build_background(self):
        return rect_mesh(*self.fem_grid, bounds=self.domain)

    def boundary_config(self, background, foundation) -> BoundaryConfig:
        d_c = self.contact_distance
        if d_c is None:
            d_c = 2.0 * background.h_mesh
        return BoundaryConfig(
            self.domain, dirichlet_side=self.dirichlet_side,
            dirichlet_span=self.dirichlet_span, neumann_side=self.neumann_side,
            neumann_span=self.neumann_span, foundation=foundation,
            contact_distance=None if foundation is None else d_c)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(eps=self.penalty_eps, rtol=self.newton_rtol,
                            max_iters=self.newton_max_iters, tie_tol=self.tie_tol)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.compliance_weight, self.volume_weight)


def _untuple(v):
    if isinstance(v, list):
        return tuple(_untuple(x) for x in v)
    return v


@dataclass
class IterationRecord:
    k: int
    J: float
    compliance: float
    volume: float
    grad_norm: float
    T_accepted: float
    newton_iters: int
    biactive_normal: float
    biactive_tangential: float
    wall_time: float

    def row(self):
        return [self.k, repr(float(self.J)), repr(float(self.compliance)),
                repr(float(self.volume)), repr(float(self.grad_norm)),
                repr(float(self.T_accepted)), self.newton_iters,
                repr(float(self.biactive_normal)),
                repr(float(self.biactive_tangential)), f"{self.wall_time:.6f}"]

    def key_fields(self):
        """Deterministic fields (everything except the wall-clock time)."""
        return (self.k, self.J, self.compliance, self.volume, self.grad_norm,
                self.T_accepted, self.newton_iters, self.biactive_normal,
                self.biactive_tangential)


@dataclass
class OptimizationResult:
    final_mesh: object
    history: list
    status: str
    level_set: LevelSetField
    final_state: object = None


def write_history_csv(path, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_HEADER)
        for r in records:
            wr.writerow(r.row())


def _transfer_nearest(old_space, old_u, new_space):
    """Warm start: copy dof values from the nearest old dof coordinates."""
    tree = cKDTree(old_space.dof_coords)
    _, idx = tree.query(new_space.dof_coords)
    vals = old_u.reshape(-1, 2)[idx]
    return vals.reshape(-1)


class _Evaluation:
    """One forward+adjoint+gradient evaluation on a given level set."""

    def __init__(self, cfg: OptimizationConfig, ls: LevelSetField, background,
                 bcfg, foundation, warm=None, need_gradient=True):
        self.mesh = cut_mesh(background, ls, bcfg)
        self.space = FeSpace(self.mesh, cfg.degree)
        loads = LoadData(body_force=cfg.body_force, traction=cfg.traction)
        friction = FrictionModel(cfg.friction_coefficient, cfg.tresca_threshold)
        self.problem = ContactProblem(
            self.space, MaterialModel(**cfg.material), loads, friction,
            foundation, cfg.solver_config(), model=cfg.model)
        u0 = None
        if warm is not None:
            u0 = _transfer_nearest(warm[0], warm[1], self.space)
        try:
            self.state = self.problem.solve(u0)
        except NewtonError:
            if u0 is None:
                raise
            self.state = self.problem.solve(None)  # retry cold
        ocfg = cfg.objective_config()
        self.J, self.compliance, self.volume = objective(self.problem, self.state, ocfg)
        self.diag = biactive_measure(self.problem, self.state, tol_bi=cfg.tie_tol)
        self.adjoint = self.gradient = None
        if need_gradient:
            self.adjoint = solve_adjoint(self.problem, self.state, ocfg)
            self.gradient = build_shape_gradient(self.problem, self.state,
                                                 self.adjoint, ocfg)


def _segment_protection(grid: Grid, domain, side, span, radius):
    """Smoothstep factor vanishing within `radius` of a boundary segment."""
    if radius is None or radius <= 0 or side is None:
        return np.ones(grid.shape)
    x0, y0, x1, y1 = domain
    axis, value = {"left": (0, x0), "right": (0, x1),
                   "bottom": (1, y0), "top": (1, y1)}[side]
    lo, hi = span if span is not None else ((y0, y1) if axis == 0 else (x0, x1))
    pts = grid.nodes()
    other = pts[:, 1 - axis]
    d_axis = np.abs(pts[:, axis] - value)
    d_other = np.abs(other - np.clip(other, lo, hi))
    t = np.clip(np.hypot(d_axis, d_other) / radius, 0.0, 1.0)
    return (t * t * (3 - 2 * t)).reshape(grid.shape)  # smoothstep


def _clamp_outward_growth(theta):
    """Zero positive (growth) speeds on the grid-boundary ring.

    The design cannot extend beyond the box, so outward growth requested at
    the box edge is unrealizable; left in place it only inflates max|theta|
    and collapses the pseudo-time step for every other boundary point.
    """
    th = theta.copy()
    for sl in (np.s_[0, :], np.s_[-1, :], np.s_[:, 0], np.s_[:, -1]):
        th[sl] = np.minimum(th[sl], 0.0)
    return th


def _velocity_protection(cfg: OptimizationConfig, grid: Grid):
    """Freeze the velocity near the load segment and the clamping wall.

    The Neumann facets are fixed data of the problem; the Dirichlet strip
    keeps shapes admissible (the clamped boundary must keep positive length)
    under objectives that shrink everywhere.
    """
    r_n = cfg.protect_neumann_radius
    if r_n is None:
        r_n = 3.0 * grid.spacing
    r_d = cfg.protect_dirichlet_radius
    if r_d is None:
        r_d = 2.0 * grid.spacing
    mask = _segment_protection(grid, cfg.domain, cfg.neumann_side, cfg.neumann_span, r_n)
    mask = np.minimum(mask, _segment_protection(
        grid, cfg.domain, cfg.dirichlet_side, cfg.dirichlet_span, r_d))
    return mask


def run(cfg: OptimizationConfig, output_dir=None, vtk_every: int = 0) -> OptimizationResult:
    """Execute the descent loop; returns the final mesh and the history."""
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "run.json", "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)

    grid = cfg.build_grid()
    foundation = cfg.build_foundation()
    background = cfg.build_background()
    bcfg = cfg.boundary_config(background, foundation)
    ls = init_signed_distance(cfg.initial_shape, grid)
    reg_length = cfg.regularization_length
    if reg_length is None:
        reg_length = 2.0 * grid.spacing
    regularizer = GridH1Regularizer(grid, reg_length)
    protect = _velocity_protection(cfg, grid)

    records = []
    status = "iteration-cap"
    warm = None
    current = None
    accepted_since_reinit = 0

    def snapshot(tag, ev, theta=None):
        if out is None:
            return
        vtkio.write_unstructured(
            out / f"shape_{tag}.vtk", ev.mesh,
            facet_data={"label": ev.mesh.facet_labels.astype(float)})
        pd = {"displacement": ev.state.u.values.reshape(-1, 2)[:len(ev.mesh.vertices)]}
        vtkio.write_unstructured(out / f"field_{tag}.vtk", ev.mesh, point_data=pd)
        fields = {"phi": ls.phi}
        if theta is not None:
            fields["theta"] = theta
        vtkio.write_structured_points(out / f"levelset_{tag}.vtk", grid, fields)

    try:
        current = _Evaluation(cfg, ls, background, bcfg, foundation, warm=None,
                              need_gradient=cfg.max_iters > 0)
    except (InadmissibleShapeError, NewtonError) as exc:
        raise InadmissibleShapeError(f"initial shape evaluation failed: {exc}")

    t_start = time.perf_counter()
    J0 = current.J
    k = 0
    while True:
        tick = time.perf_counter()
        if k >= cfg.max_iters:
            status = "iteration-cap"
            records.append(IterationRecord(
                k, current.J, current.compliance, current.volume, 0.0, 0.0,
                current.state.newton_iters, current.diag.normal_measure,
                current.diag.tangential_measure, time.perf_counter() - tick))
            break

        # descent velocity from the H1-regularized gradient
        if not ls.interface_gradient_ok():
            ls = reinitialize(ls, iters=2 * int(5 / 0.5), check_drift=False)
            current = _Evaluation(cfg, ls, background, bcfg, foundation,
                                  warm=(current.space, current.state.u.values))
        normal_nodal = ls.normal_field()
        G = current.gradient.scatter_to_grid(grid, normal_nodal)
        theta = regularizer.solve(G)
        theta_used = _clamp_outward_growth(theta * protect)
        dJ_theta = float(G.ravel() @ theta_used.ravel())
        vmax = np.abs(theta_used).max()
        if vmax < 1e-14:
            status = "stagnated"
            records.append(IterationRecord(
                k, current.J, current.compliance, current.volume, abs(dJ_theta),
                0.0, current.state.newton_iters, current.diag.normal_measure,
                current.diag.tangential_measure, time.perf_counter() - tick))
            break

        # backtracked pseudo-time horizon; reinitialization enters the trial
        # so that the acceptance test covers its (small) boundary drift and
        # the accepted objective sequence stays strictly decreasing
        reinit_due = (accepted_since_reinit + 1 >= cfg.reinit_every) or not _band_ok(ls)
        T = cfg.cfl * grid.spacing / vmax
        accepted = None
        for _ in range(cfg.line_search_max + 1):
            try:
                ls_trial = advect(ls, theta_used, T)
                if reinit_due:
                    ls_trial = reinitialize(ls_trial, iters=20, check_drift=False)
                trial = _Evaluation(cfg, ls_trial, background, bcfg, foundation,
                                    warm=(current.space, current.state.u.values))
            except (InadmissibleShapeError, NewtonError):
                T *= 0.5
                continue
            if trial.J < current.J:
                accepted = (ls_trial, trial, T)
                break
            T *= 0.5
        if accepted is None:
            status = "stagnated"
            records.append(IterationRecord(
                k, current.J, current.compliance, current.volume, abs(dJ_theta),
                0.0, current.state.newton_iters, current.diag.normal_measure,
                current.diag.tangential_measure, time.perf_counter() - tick))
            break

        ls, nxt, T_acc = accepted
        records.append(IterationRecord(
            k, current.J, current.compliance, current.volume, abs(dJ_theta),
            T_acc, current.state.newton_iters, current.diag.normal_measure,
            current.diag.tangential_measure, time.perf_counter() - tick))
        if vtk_every and out is not None and k % vtk_every == 0:
            snapshot(f"{k:04d}", current, theta_used)
        current = nxt
        k += 1
        accepted_since_reinit = 0 if reinit_due else accepted_since_reinit + 1

        # stagnation window on the accepted objective values
        if len(records) > cfg.stagnation_window:
            Jw = records[-1 - cfg.stagnation_window].J
            if abs(current.J - Jw) <= cfg.stagnation_rtol * abs(J0):
                status = "converged"
                records.append(IterationRecord(
                    k, current.J, current.compliance, current.volume, 0.0, 0.0,
                    current.state.newton_iters, current.diag.normal_measure,
                    current.diag.tangential_measure, time.perf_counter() - tick))
                break

    if out is not None:
        write_history_csv(out / "history.csv", records)
        vtkio.write_unstructured(
            out / "final.vtk", current.mesh,
            point_data={"displacement":
                        current.state.u.values.reshape(-1, 2)[:len(current.mesh.vertices)]},
            facet_data={"label": current.mesh.facet_labels.astype(float)})
    return OptimizationResult(current.mesh, records, status, ls, current.state)


def _band_ok(ls: LevelSetField):
    norms = ls.band_gradient_norms()
    return len(norms) == 0 or (norms.min() >= 0.8 and norms.max() <= 1.2)


def evaluate_only(cfg: OptimizationConfig, shape=None, output_dir=None) -> IterationRecord:
    """Single forward + adjoint + gradient evaluation (no advection)."""
    grid = cfg.build_grid()
    foundation = cfg.build_foundation()
    background = cfg.build_background()
    bcfg = cfg.boundary_config(background, foundation)
    ls = shape if isinstance(shape, LevelSetField) else \
        init_signed_distance(shape if shape is not None else cfg.initial_shape, grid)
    tick = time.perf_counter()
    ev = _Evaluation(cfg, ls, background, bcfg, foundation)
    if not ls.interface_gradient_ok():
        ls = reinitialize(ls, iters=20, check_drift=False)
    G = ev.gradient.scatter_to_grid(grid, ls.normal_field())
    reg_length = cfg.regularization_length or 2.0 * grid.spacing
    theta = GridH1Regularizer(grid, reg_length).solve(G)
    rec = IterationRecord(0, ev.J, ev.compliance, ev.volume,
                          abs(float(G.ravel() @ theta.ravel())), 0.0,
                          ev.state.newton_iters, ev.diag.normal_measure,
                          ev.diag.tangential_measure, time.perf_counter() - tick)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "run.json", "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
        write_history_csv(out / "history.csv", [rec])
        vtkio.write_unstructured(
            out / "final.vtk", ev.mesh,
            point_data={"displacement":
                        ev.state.u.values.reshape(-1, 2)[:len(ev.mesh.vertices)]},
            facet_data={"label": ev.mesh.facet_labels.astype(float)})
    return rec
