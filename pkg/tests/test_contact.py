import numpy as np
import pytest

from contactopt.contact import (ContactProblem, FrictionModel, SolverConfig,
                                biactive_measure)
from contactopt.fem import FeSpace, LoadData, MaterialModel
from contactopt.foundation import RigidFoundation
from contactopt.mesh import CONTACT, FREE, NEUMANN, rect_mesh
from contactopt.problems import pressed_strip, strip_nudge


def test_unloaded_body_zero_solution():
    problem = pressed_strip(pressure=0.0)
    state = problem.solve()
    assert np.abs(state.u.values).max() == 0.0
    assert np.all(state.sigma_nn == 0.0)
    assert np.all(state.sigma_nt == 0.0)


def test_residual_trivial_cases():
    problem = pressed_strip()
    u0 = np.zeros(2 * problem.space.ndof)
    # at u=0 the contact terms vanish (pmax(-g)=0 on the boundary, q(.,0)=0),
    # so R(0) . v = -L(v)
    R = problem.residual(u0)
    free = ~problem.mask
    assert np.allclose(R[free], -problem.F[free])

    quiet = pressed_strip(pressure=0.0)
    assert np.abs(quiet.residual(np.zeros(2 * quiet.space.ndof))).max() == 0.0


def test_force_balance_penetration():
    # separate oracle: uniform pressure p transmits through the strip, so
    # sigma_nn = -p and the penalty gives penetration eps * p
    p = 0.01
    for eps in (1e-4, 1e-6):
        problem = pressed_strip(pressure=p, eps=eps, nu=0.0, friction=(1.0, 1.0))
        state = problem.solve(strip_nudge(problem.space))
        assert state.penetration.max() == pytest.approx(eps * p, rel=1e-6)
        assert state.penetration.min() == pytest.approx(eps * p, rel=1e-6)
        assert np.all(np.abs(state.sigma_nn + p) < 1e-6 * p)


def test_penetration_scaling_linear_in_eps():
    p = 0.01
    pens = []
    eps_values = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
    for eps in eps_values:
        problem = pressed_strip(pressure=p, eps=eps, nu=0.0, friction=(1.0, 1.0))
        state = problem.solve(strip_nudge(problem.space))
        pens.append(state.penetration.max())
    slope = np.polyfit(np.log10(eps_values), np.log10(pens), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.1)
    assert np.all(np.abs(np.array(pens) / (np.array(eps_values) * p) - 1) < 0.05)


def test_frictionless_consistency():
    problem = pressed_strip(model="sliding")
    state = problem.solve(strip_nudge(problem.space))
    assert np.all(state.sigma_nt == 0.0)
    # tresca with huge threshold reproduces stick, not slide
    stick = pressed_strip(model="tresca", friction=(1.0, 1.0))
    st = stick.solve(strip_nudge(stick.space))
    assert np.all(st.sticking)


def test_sign_conditions():
    for model, fr in (("tresca", (0.5, 0.02)), ("sliding", (0.5, 0.02))):
        problem = pressed_strip(model=model, friction=fr, nu=0.3)
        state = problem.solve(strip_nudge(problem.space))
        assert np.all(state.sigma_nn <= 0.0)
        assert np.all(np.abs(state.sigma_nt) <= state.g_t * (1 + 1e-12) + 1e-30)


def test_jacobian_structure():
    problem = pressed_strip()
    rng = np.random.default_rng(42)
    u = rng.standard_normal(2 * problem.space.ndof) * 1e-3
    u[problem.mask] = 0.0
    B = problem.jacobian(u)
    asym = abs(B - B.T).max()
    assert asym <= 1e-12 * abs(B).max()
    # separated state: normal branch off, tangential stick mass on
    up = np.zeros(2 * problem.space.ndof)
    up[1::2] = 1.0  # lift the strip: gap positive, u_t = 0
    B_sep = problem.jacobian(up)
    K = problem.K_elim
    extra = (B_sep - K)
    assert abs(extra).max() > 0  # the (1/eps) tangential mass remains
    # fully sliding state drops the tangential branch
    uslide = np.zeros(2 * problem.space.ndof)
    uslide[0::2] = 1.0  # huge tangential displacement, |u_t| > alpha
    uslide[1::2] = 1.0  # and separated
    uslide[problem.mask] = 0.0
    B_slide = problem.jacobian(uslide)
    assert abs(B_slide - K).max() <= 1e-12 * abs(K).max()


def test_energy_optimality():
    problem = pressed_strip(nu=0.3)
    state = problem.solve(strip_nudge(problem.space))
    E0 = problem.energy(state.u.values)
    rng = np.random.default_rng(42)
    for _ in range(100):
        d = rng.standard_normal(2 * problem.space.ndof)
        d[problem.mask] = 0.0
        trial = state.u.values + 1e-4 * d / np.linalg.norm(d)
        assert problem.energy(trial) >= E0 - 1e-12


def test_newton_iteration_counts():
    problem = pressed_strip()
    state = problem.solve(strip_nudge(problem.space))
    assert state.converged
    warm = problem.solve(state.u.values)
    assert warm.newton_iters <= 30


def test_biactive_measures():
    problem = pressed_strip(nu=0.0, friction=(1.0, 1.0))
    state = problem.solve(strip_nudge(problem.space))
    diag = biactive_measure(problem, state)
    # strict contact (penetration eps*p), strict stick: both measures vanish
    assert diag.normal_measure == 0.0
    assert diag.tangential_measure == 0.0
    assert diag.contact_length == pytest.approx(1.0, rel=1e-12)

    # fully separated
    sep = pressed_strip(pressure=0.0)
    st = sep.solve()
    d2 = biactive_measure(sep, st)
    # u = 0 on the zero-gap strip: |pen| = 0 everywhere -> fully biactive
    assert d2.normal_measure == pytest.approx(1.0, rel=1e-12)

    # synthetic tangential tie: u_t = eps * F * s exactly
    prob3 = pressed_strip(friction=(1.0, 1.0))
    ut_target = prob3.config.eps * 1.0
    u = np.zeros(2 * prob3.space.ndof)
    u[0::2] = ut_target  # pure tangential motion along the bottom (t = +x)
    u[1::2] = 1.0        # lift off so only the friction tie remains
    u[prob3.mask] = 0.0
    st3 = prob3._make_state(u, 0, [])
    d3 = biactive_measure(prob3, st3, tol_bi=1e-15)
    interior = np.abs(prob3.xq.reshape(-1, 2)[:, 0] - 0.0) > 1e-9
    # every quadrature point not touching the pinned left column is tied
    assert d3.tangential_measure >= 0.9


def test_separated_state_independent_of_eps():
    # foundation far below: contact terms never activate
    def build(eps):
        mesh = rect_mesh(6, 2, bounds=(0, 0, 1, 0.25))
        mids = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
        labels = np.full(len(mesh.facets), FREE)
        labels[np.abs(mids[:, 1] - 0.25) < 1e-12] = NEUMANN
        labels[np.abs(mids[:, 1]) < 1e-12] = CONTACT
        mesh.facet_labels = labels
        space = FeSpace(mesh, 2)
        fix = np.zeros(2 * space.ndof, dtype=bool)
        left = np.abs(space.dof_coords[:, 0]) < 1e-9
        fix[0::2] = left
        fix[1::2] = left
        return ContactProblem(space, MaterialModel(1.0, 0.3),
                              LoadData(traction=(0.0, -1e-4)),
                              FrictionModel(0.5, 0.02),
                              RigidFoundation.half_plane(offset=-0.5),
                              SolverConfig(eps=eps), model="tresca", extra_fixed=fix)

    states = [build(eps).solve() for eps in (1e-6, 5e-7)]
    diff = np.abs(states[0].u.values - states[1].u.values).max()
    assert diff <= 1e-3 * np.abs(states[0].u.values).max()


def test_cold_start_benchmark_state(tmp_path):
    # the cantilever-style configuration must converge from scratch and
    # satisfy both contact identities at every quadrature point
    from contactopt.problems import cantilever_config
    from contactopt.levelset import cut_mesh, init_signed_distance

    cfg = cantilever_config(model="tresca", fem_grid=(30, 15))
    grid = cfg.build_grid()
    fnd = cfg.build_foundation()
    bg = cfg.build_background()
    ls = init_signed_distance(cfg.initial_shape, grid)
    cm = cut_mesh(bg, ls, cfg.boundary_config(bg, fnd))
    space = FeSpace(cm, 2)
    problem = ContactProblem(space, MaterialModel(**cfg.material),
                             LoadData(traction=cfg.traction),
                             FrictionModel(cfg.friction_coefficient, cfg.tresca_threshold),
                             fnd, cfg.solver_config(), model="tresca")
    state = problem.solve()
    rel = np.linalg.norm(problem.residual(state.u.values)) / problem.load_norm
    assert rel <= 1e-10
    assert np.all(state.sigma_nn <= 0.0)
    assert np.all(np.abs(state.sigma_nt) <= state.g_t + 1e-12)
    warm = problem.solve(state.u.values)
    assert warm.newton_iters <= 30
