"""Cross-cutting verification battery.

Each check pits one piece of the toolkit against an independent oracle:
sampled projection laws, the force-balance penetration scaling of the
penalty, the algebraic identity between the two shape-derivative routes, and
finite differences of the transported objective.  All randomness is seeded;
every check produces a machine-readable :class:`CheckReport`.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import projections as proj
from .contact import biactive_measure
from .problems import pressed_strip, strip_nudge
from .sensitivity import (AnalyticField, MeshP1Field, ObjectiveConfig,
                          build_shape_gradient, objective,
                          objective_derivative_via_material, solve_adjoint)

__all__ = ["CheckReport", "check_projection_laws", "check_penetration_scaling",
           "check_adjoint_vs_material", "check_gradient_fd", "run_all",
           "write_checks_csv", "CHECKS_HEADER"]

CHECKS_HEADER = ["name", "measured", "target", "tolerance", "status", "runtime"]


@dataclass
class CheckReport:
    name: str
    measured: float
    target: float
    tolerance: float
    status: str  # pass / fail / skipped
    runtime: float

    @property
    def passed(self) -> bool:
        return self.status != "fail"

    def row(self):
        return [self.name, repr(self.measured), repr(self.target),
                repr(self.tolerance), self.status, f"{self.runtime:.3f}"]


def write_checks_csv(path, reports):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CHECKS_HEADER)
        for r in reports:
            wr.writerow(r.row())


def check_projection_laws(seed: int = 42, nsamples: int = 100_000) -> CheckReport:
    """Monotonicity, 1-Lipschitz bounds, |dq| <= |beta|+|h|, FD consistency."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    a = rng.uniform(-5, 5, nsamples)
    b = rng.uniform(-5, 5, nsamples)
    alpha = rng.uniform(1e-3, 3.0, nsamples)
    z1 = rng.uniform(-5, 5, nsamples)
    z2 = rng.uniform(-5, 5, nsamples)
    beta = rng.uniform(-2, 2, nsamples)
    h = rng.uniform(-2, 2, nsamples)

    violations = 0
    violations += int(np.sum((proj.pmax(a) - proj.pmax(b)) * (a - b) < -1e-15))
    violations += int(np.sum((proj.qproj(alpha, z1) - proj.qproj(alpha, z2))
                             * (z1 - z2) < -1e-15))
    violations += int(np.sum(np.abs(proj.pmax(a) - proj.pmax(b))
                             > np.abs(a - b) + 1e-15))
    violations += int(np.sum(np.abs(proj.qproj(alpha, z1) - proj.qproj(alpha, z2))
                             > np.abs(z1 - z2) + 1e-15))
    dqv = proj.dq(alpha, z1, beta, h)
    violations += int(np.sum(np.abs(dqv) > np.abs(beta) + np.abs(h) + 1e-15))

    # one-sided FD away from the tie set
    away = np.abs(np.abs(z1) - alpha) > 1e-3
    t = 1e-7
    fd = (proj.qproj(alpha[away] + t * beta[away], z1[away] + t * h[away])
          - proj.qproj(alpha[away], z1[away])) / t
    err_q = np.abs(fd - dqv[away]).max()
    uaway = np.abs(a) > 1e-3
    fdm = (proj.pmax(a[uaway] + t * b[uaway]) - proj.pmax(a[uaway])) / t
    err_m = np.abs(fdm - proj.dmax(a[uaway], b[uaway])).max()
    violations += int(err_q > 1e-5) + int(err_m > 1e-5)

    status = "pass" if violations == 0 else "fail"
    return CheckReport("projection_laws", float(violations), 0.0, 0.0, status,
                       time.perf_counter() - t0)


def check_penetration_scaling(seed: int = 42) -> CheckReport:
    """Pressed-strip penetration must equal eps * pressure across 5 decades."""
    t0 = time.perf_counter()
    pressure = 0.01
    eps_values = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6]
    pens = []
    try:
        for eps in eps_values:
            problem = pressed_strip(eps=eps, nu=0.0, friction=(1.0, 1.0))
            state = problem.solve(strip_nudge(problem.space))
            pens.append(state.penetration.max())
    except Exception:
        return CheckReport("penetration_scaling", float("nan"), 1.0, 0.1, "fail",
                           time.perf_counter() - t0)
    pens = np.array(pens)
    slope = np.polyfit(np.log10(eps_values), np.log10(pens), 1)[0]
    ratio_ok = np.all(np.abs(pens / (np.array(eps_values) * pressure) - 1.0) <= 0.05)
    ok = abs(slope - 1.0) <= 0.1 and ratio_ok
    return CheckReport("penetration_scaling", float(slope), 1.0, 0.1,
                       "pass" if ok else "fail", time.perf_counter() - t0)


def _random_poly_field(rng):
    cx = rng.uniform(-1, 1, 6)
    cy = rng.uniform(-1, 1, 6)

    def value(p):
        x, y = p[:, 0], p[:, 1]
        basis = np.stack([np.ones_like(x), x, y, x * y, x**2, y**2], axis=1)
        return np.stack([basis @ cx, basis @ cy], axis=1)

    def grad(p):
        x, y = p[:, 0], p[:, 1]
        dbx = np.stack([np.zeros_like(x), np.ones_like(x), np.zeros_like(x),
                        y, 2 * x, np.zeros_like(x)], axis=1)
        dby = np.stack([np.zeros_like(x), np.zeros_like(x), np.ones_like(x),
                        x, np.zeros_like(x), 2 * y], axis=1)
        g = np.zeros((len(p), 2, 2))
        g[:, 0, 0] = dbx @ cx
        g[:, 0, 1] = dby @ cx
        g[:, 1, 0] = dbx @ cy
        g[:, 1, 1] = dby @ cy
        return g

    return AnalyticField(value, grad)


def check_adjoint_vs_material(seed: int = 42, nfields: int = 5) -> CheckReport:
    """The distributed and material-derivative dJ evaluations must coincide."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    problem = pressed_strip()
    state = problem.solve(strip_nudge(problem.space))
    ocfg = ObjectiveConfig(1.0, 0.5)
    adjoint = solve_adjoint(problem, state, ocfg)
    grad = build_shape_gradient(problem, state, adjoint, ocfg)
    worst = 0.0
    for _ in range(nfields):
        theta = _random_poly_field(rng)
        d1 = grad.evaluate(theta)
        d2 = objective_derivative_via_material(problem, state, theta, ocfg)
        scale = max(abs(d1), abs(d2), 1e-300)
        worst = max(worst, abs(d1 - d2) / scale)
    status = "pass" if worst <= 1e-8 else "fail"
    return CheckReport("adjoint_vs_material", worst, 0.0, 1e-8, status,
                       time.perf_counter() - t0)


def _fd_theta_fields():
    """Normal bump, tangential-free bump, translation-like; zero at the left edge."""
    def mk(fx, fy):
        return AnalyticField(lambda p: np.stack([fx(p), fy(p)], axis=1))

    zero = lambda p: np.zeros(len(p))
    normal_bump = mk(zero, lambda p: -0.4 * np.sin(np.pi * p[:, 0]) * (1 + 0.3 * p[:, 1]))
    tangential_bump = mk(lambda p: 0.3 * np.sin(np.pi * p[:, 0]) * (0.5 + p[:, 1]), zero)
    translation = mk(lambda p: 0.2 * (1 - np.cos(np.pi * p[:, 0])),
                     lambda p: -0.2 * (1 - np.cos(np.pi * p[:, 0])))
    return [normal_bump, tangential_bump, translation]


def check_gradient_fd(seed: int = 42) -> CheckReport:
    """FD of the transported objective vs the assembled dJ on the strip."""
    t0 = time.perf_counter()
    ocfg = ObjectiveConfig(1.0, 0.5)
    base = pressed_strip()
    state = base.solve(strip_nudge(base.space))
    diag = biactive_measure(base, state, warn_band=1e-6)
    if not diag.clean:
        return CheckReport("gradient_fd", float("nan"), 0.0, 0.02, "skipped",
                           time.perf_counter() - t0)
    J0 = objective(base, state, ocfg)[0]
    adjoint = solve_adjoint(base, state, ocfg)
    grad = build_shape_gradient(base, state, adjoint, ocfg)
    steps = [1e-2, 1e-3, 1e-4]
    worst_mid = 0.0
    worst_slope = np.inf
    for theta in _fd_theta_fields():
        dJ = grad.evaluate(MeshP1Field.interpolate(base.space, theta))
        errs = []
        for t in steps:
            moved = pressed_strip(deform=lambda v, t=t: t * theta.value(v))
            st = moved.solve(strip_nudge(moved.space))
            errs.append(abs((objective(moved, st, ocfg)[0] - J0) / t - dJ)
                        / max(abs(dJ), 1e-300))
        worst_mid = max(worst_mid, errs[1])
        fit = np.polyfit(np.log10(steps), np.log10(np.maximum(errs, 1e-16)), 1)[0]
        worst_slope = min(worst_slope, fit)
    ok = worst_mid <= 0.02 and worst_slope >= 0.9
    return CheckReport("gradient_fd", worst_mid, 0.0, 0.02,
                       "pass" if ok else "fail", time.perf_counter() - t0)


def run_all(seed: int = 42):
    """Run the whole battery; overall success is the conjunction."""
    return [check_projection_laws(seed),
            check_penetration_scaling(seed),
            check_adjoint_vs_material(seed),
            check_gradient_fd(seed)]
