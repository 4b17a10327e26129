import numpy as np
import pytest

from contactopt.contact import biactive_measure
from contactopt.fem import Field
from contactopt.problems import pressed_strip, strip_nudge
from contactopt.sensitivity import (AnalyticField, GridH1Regularizer, MeshP1Field,
                                    NormalVelocityField, ObjectiveConfig,
                                    build_shape_gradient, objective,
                                    objective_derivative_via_material,
                                    shape_derivative_boundary, solve_adjoint,
                                    solve_material_derivative)
from contactopt.levelset import Grid, LevelSetField


@pytest.fixture(scope="module")
def strip_state():
    problem = pressed_strip(nx=10, ny=3, nu=0.3)
    state = problem.solve(strip_nudge(problem.space))
    return problem, state


def poly_field(cx, cy):
    cx, cy = np.asarray(cx, float), np.asarray(cy, float)

    def value(p):
        x, y = p[:, 0], p[:, 1]
        basis = np.stack([np.ones_like(x), x, y, x * y, x**2, y**2], axis=1)
        return np.stack([basis @ cx, basis @ cy], axis=1)

    def grad(p):
        x, y = p[:, 0], p[:, 1]
        one, zero = np.ones_like(x), np.zeros_like(x)
        dbx = np.stack([zero, one, zero, y, 2 * x, zero], axis=1)
        dby = np.stack([zero, zero, one, x, zero, 2 * y], axis=1)
        g = np.zeros((len(p), 2, 2))
        g[:, 0, 0], g[:, 0, 1] = dbx @ cx, dby @ cx
        g[:, 1, 0], g[:, 1, 1] = dbx @ cy, dby @ cy
        return g

    return AnalyticField(value, grad)


class TestObjective:
    def test_zero_displacement(self, strip_state):
        problem, state = strip_state
        zero = type(state)(u=Field(problem.space), x=state.x, w=state.w,
                           gap=state.gap, penetration=state.penetration,
                           u_t=state.u_t, sigma_nn=state.sigma_nn,
                           sigma_nt=state.sigma_nt, g_t=state.g_t,
                           in_contact=state.in_contact, sticking=state.sticking)
        J, C, V = objective(problem, zero, ObjectiveConfig(15.0, 0.01))
        assert C == 0.0
        assert V == pytest.approx(0.25)
        assert J == pytest.approx(0.01 * 0.25)

    def test_volume_only(self, strip_state):
        problem, state = strip_state
        J, _, V = objective(problem, state, ObjectiveConfig(0.0, 1.0))
        assert J == pytest.approx(V)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            ObjectiveConfig(0.0, 0.0)
        with pytest.raises(ValueError):
            ObjectiveConfig(-1.0, 1.0)


class TestAdjoint:
    def test_volume_only_adjoint_vanishes(self, strip_state):
        problem, state = strip_state
        p = solve_adjoint(problem, state, ObjectiveConfig(0.0, 1.0))
        assert np.abs(p.values).max() == 0.0

    def test_self_adjoint_compliance(self):
        # no contact terms active: b_eps = a and p = -u for unit weight
        problem = pressed_strip(model="none", clamp_left=True)
        state = problem.solve()
        p = solve_adjoint(problem, state, ObjectiveConfig(1.0, 0.0))
        assert np.abs(p.values + state.u.values).max() <= \
            1e-10 * np.abs(state.u.values).max()

    def test_contact_adjoint_residual(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(1.0, 0.5)
        p = solve_adjoint(problem, state, cfg)
        B = problem.jacobian(state.u.values)
        rhs = np.where(problem.mask, 0.0, -cfg.compliance_weight * problem.F)
        rel = np.linalg.norm(B @ p.values - rhs) / np.linalg.norm(rhs)
        assert rel <= 1e-10
        assert np.abs(p.values + state.u.values).max() > \
            1e-6 * np.abs(state.u.values).max()  # contact breaks self-adjointness


class TestShapeGradient:
    def test_zero_theta(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(1.0, 0.5)
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        zero = AnalyticField(lambda p: np.zeros((len(p), 2)))
        assert grad.evaluate(zero) == 0.0

    def test_linearity(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(1.0, 0.5)
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        rng = np.random.default_rng(42)
        c1 = (rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6))
        c2 = (rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6))
        a, b = 0.7, -1.3
        t1, t2 = poly_field(*c1), poly_field(*c2)
        combo = poly_field(a * c1[0] + b * c2[0], a * c1[1] + b * c2[1])
        lhs = grad.evaluate(combo)
        rhs = a * grad.evaluate(t1) + b * grad.evaluate(t2)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)

    def test_volume_only_divergence_identity(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(0.0, 1.0)
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        theta = poly_field([0.0, 1.0, 0.0, 0.0, 1.0, -0.3],
                           [0.2, 0.0, 0.5, 0.4, 0.0, 0.0])
        # exact: int_Omega div theta over [0,1]x[0,0.25]
        # div = (1 + 2x - 0.3*0) + (0.5 + 0.4x)  -> evaluate analytically
        # theta_x = x + x^2 - 0.3 y^2, theta_y = 0.2 + 0.5 y + 0.4 x y
        # div = 1 + 2x + 0.5 + 0.4 x
        exact = (1.5 * 0.25 + 2.4 * 0.5 * 0.25)
        assert grad.evaluate(theta) == pytest.approx(exact, abs=1e-10)

    def test_adjoint_vs_material_identity(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(1.0, 0.5)
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        rng = np.random.default_rng(7)
        for _ in range(5):
            theta = poly_field(rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6))
            d1 = grad.evaluate(theta)
            d2 = objective_derivative_via_material(problem, state, theta, cfg)
            assert abs(d1 - d2) <= 1e-8 * max(abs(d1), abs(d2), 1e-12)

    def test_material_derivative_trivial(self, strip_state):
        problem, state = strip_state
        zero = AnalyticField(lambda p: np.zeros((len(p), 2)))
        mder = solve_material_derivative(problem, state, zero)
        assert np.abs(mder.w.values).max() == 0.0
        assert not mder.flagged

    def test_fd_gradient(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(1.0, 0.5)
        diag = biactive_measure(problem, state, warn_band=1e-6)
        assert diag.clean
        J0 = objective(problem, state, cfg)[0]
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        theta = AnalyticField(lambda p: np.stack(
            [0.1 * np.sin(np.pi * p[:, 1]) * p[:, 0],
             -0.3 * np.sin(np.pi * p[:, 0]) * (1 + 0.5 * p[:, 1])], axis=1))
        dJ = grad.evaluate(MeshP1Field.interpolate(problem.space, theta))
        errs = []
        for t in (1e-2, 1e-3, 1e-4):
            moved = pressed_strip(nx=10, ny=3, nu=0.3,
                                  deform=lambda v, t=t: t * theta.value(v))
            st = moved.solve(strip_nudge(moved.space))
            errs.append(abs((objective(moved, st, cfg)[0] - J0) / t - dJ) / abs(dJ))
        assert errs[1] <= 0.02
        slope = np.polyfit(np.log10([1e-2, 1e-3, 1e-4]),
                           np.log10(np.maximum(errs, 1e-16)), 1)[0]
        assert slope >= 0.9


class TestBoundaryForm:
    def test_volume_only_density(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(0.0, 1.0)
        adj = solve_adjoint(problem, state, cfg)
        dens = shape_derivative_boundary(problem, state, adj, cfg)
        assert np.allclose(dens.density_A, 1.0)
        assert np.all(dens.density_B == 0.0)
        assert np.all(dens.density_C == 0.0)
        # dJ[theta n] = a2 * integral of theta over the boundary
        val = dens.evaluate(lambda p: np.ones(len(p)))
        assert val == pytest.approx(2 * (1 + 0.25), rel=1e-12)

    def test_agrees_with_distributed(self):
        """Cross-formulation oracle: boundary vs distributed form within 5%."""
        problem = pressed_strip(nx=20, ny=6, nu=0.3)
        state = problem.solve(strip_nudge(problem.space))
        cfg = ObjectiveConfig(1.0, 0.5)
        adj = solve_adjoint(problem, state, cfg)
        grad = build_shape_gradient(problem, state, adj, cfg)
        dens = shape_derivative_boundary(problem, state, adj, cfg)

        # smooth field: vertical bump strongest at the bottom, fading upward,
        # vanishing on the left/right edges; its boundary trace is a normal
        # speed on the contact boundary only
        h = 0.25

        def theta_vec(p):
            return np.stack([np.zeros(len(p)),
                             -np.sin(np.pi * p[:, 0])**2 * (1 - p[:, 1] / h)], axis=1)

        def theta_grad(p):
            g = np.zeros((len(p), 2, 2))
            g[:, 1, 0] = -np.pi * np.sin(2 * np.pi * p[:, 0]) * (1 - p[:, 1] / h)
            g[:, 1, 1] = np.sin(np.pi * p[:, 0])**2 / h
            return g

        def speed(p):
            # theta . n on the boundary: nonzero only at the bottom (n=(0,-1))
            out = np.zeros(len(p))
            bottom = np.abs(p[:, 1]) < 1e-9
            out[bottom] = np.sin(np.pi * p[bottom, 0])**2
            return out

        d_boundary = dens.evaluate(speed)
        d_distributed = grad.evaluate(AnalyticField(theta_vec, theta_grad))
        assert d_boundary == pytest.approx(d_distributed, rel=0.05)


class TestDescent:
    def test_regularizer_identity(self):
        grid = Grid(40, 20, (0, 0, 2, 1))
        reg = GridH1Regularizer(grid, 2 * grid.spacing)
        rng = np.random.default_rng(42)
        G = rng.standard_normal((grid.nx + 1) * (grid.ny + 1)) * 1e-3
        theta = reg.solve(G)
        th = theta.ravel()
        lhs = float(G @ th)
        rhs = -(reg.reg_length**2 * th @ (reg.K @ th) + th @ (reg.M @ th))
        assert lhs == pytest.approx(rhs, rel=1e-10)
        assert lhs <= 0.0

    def test_zero_functional_zero_velocity(self):
        grid = Grid(20, 10, (0, 0, 2, 1))
        reg = GridH1Regularizer(grid, 2 * grid.spacing)
        theta = reg.solve(np.zeros((grid.nx + 1) * (grid.ny + 1)))
        assert np.all(theta == 0.0)

    def test_descent_identity_through_gradient(self, strip_state):
        """dJ[theta n] computed by the functional equals G . theta exactly."""
        problem, state = strip_state
        cfg = ObjectiveConfig(1.0, 0.5)
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        grid = Grid(64, 16, (0, 0, 1, 0.25))
        pts = grid.nodes()
        phi = -np.minimum.reduce([pts[:, 0], 1 - pts[:, 0],
                                  pts[:, 1], 0.25 - pts[:, 1]]).reshape(grid.shape)
        ls = LevelSetField(grid, phi)
        normals = ls.normal_field()
        G = grad.scatter_to_grid(grid, normals)
        reg = GridH1Regularizer(grid, 2 * grid.spacing)
        theta = reg.solve(G)
        dj_scatter = float(G.ravel() @ theta.ravel())
        field = NormalVelocityField(grid, theta, normals)
        dj_field = grad.evaluate(field)
        assert dj_field == pytest.approx(dj_scatter, rel=1e-10)
        assert dj_field <= 0.0

    def test_volume_only_shrinks_in_mean(self, strip_state):
        problem, state = strip_state
        cfg = ObjectiveConfig(0.0, 1.0)
        grad = build_shape_gradient(problem, state,
                                    solve_adjoint(problem, state, cfg), cfg)
        grid = Grid(64, 16, (0, 0, 1, 0.25))
        pts = grid.nodes()
        phi = -np.minimum.reduce([pts[:, 0], 1 - pts[:, 0],
                                  pts[:, 1], 0.25 - pts[:, 1]]).reshape(grid.shape)
        ls = LevelSetField(grid, phi)
        G = grad.scatter_to_grid(grid, ls.normal_field())
        theta = GridH1Regularizer(grid, 2 * grid.spacing).solve(G)
        # boundary mean of the speed must be negative (volume decreases)
        edge = np.concatenate([theta[0, :], theta[-1, :], theta[:, 0], theta[:, -1]])
        assert edge.mean() < 0.0
