import numpy as np
import pytest

from contactopt.foundation import RigidFoundation
from contactopt.levelset import (BoundaryConfig, DegenerateShapeError, Grid,
                                 InadmissibleShapeError, LevelSetField, advect,
                                 curvature, cut_mesh, init_signed_distance,
                                 reinitialize)
from contactopt.mesh import CONTACT, DIRICHLET, FREE, NEUMANN, rect_mesh


@pytest.fixture
def grid():
    return Grid(160, 80, (0, 0, 2, 1))


def circle_sdf(grid, center=(1.0, 0.5), r=0.25):
    pts = grid.nodes()
    return LevelSetField(grid, (np.linalg.norm(pts - np.array(center), axis=1) - r)
                         .reshape(grid.shape))


def zero_crossing_radius(ls, center=(1.0, 0.5)):
    """Radii of the zero level along the horizontal line through the center."""
    j = int(round((center[1] - ls.grid.y0) / ls.grid.dy))
    row = ls.phi[:, j]
    out = []
    for i in range(len(row) - 1):
        a, b = row[i], row[i + 1]
        if a * b < 0 or (a == 0.0 and b != 0.0):
            s = a / (a - b) if a != b else 0.0
            out.append(abs(ls.grid.xs[i] + s * ls.grid.dx - center[0]))
    return np.array(out)


class TestInit:
    def test_full_box(self, grid):
        ls = init_signed_distance({"kind": "full"}, grid)
        inner = ls.phi[1:-1, 1:-1]
        assert np.all(inner < 0)

    def test_hole(self, grid):
        ls = init_signed_distance(
            {"kind": "holes", "holes": [{"center": (1.0, 0.5), "radius": 0.2}]}, grid)
        i = int(round(1.0 / grid.dx))
        j = int(round(0.5 / grid.dy))
        assert ls.phi[i, j] > 0  # inside the hole is outside the shape
        assert ls.phi[i, 5] < 0

    def test_two_holes_min_max_composition(self, grid):
        holes = [{"center": (0.5, 0.5), "radius": 0.15},
                 {"center": (1.5, 0.5), "radius": 0.1}]
        ls = init_signed_distance({"kind": "holes", "holes": holes}, grid,
                                  reinit_iters=0)
        pts = grid.nodes()
        box = -np.minimum.reduce([pts[:, 0], 2 - pts[:, 0], pts[:, 1], 1 - pts[:, 1]])
        brute = box
        for h in holes:
            brute = np.maximum(brute, h["radius"]
                               - np.linalg.norm(pts - np.array(h["center"]), axis=1))
        assert np.abs(ls.phi.ravel() - brute).max() < 1e-12

    def test_degenerate(self, grid):
        with pytest.raises(DegenerateShapeError):
            init_signed_distance(lambda p: np.ones(len(p)), grid)
        with pytest.raises(DegenerateShapeError):
            init_signed_distance(lambda p: -np.ones(len(p)), grid)


class TestAdvect:
    def test_zero_speed(self, grid):
        ls = circle_sdf(grid)
        out = advect(ls, np.zeros(grid.shape), 0.1)
        assert np.array_equal(out.phi, ls.phi)

    def test_grow_circle(self, grid):
        ls = circle_sdf(grid)
        T = 20 * 0.5 * grid.spacing
        out = advect(ls, np.ones(grid.shape), T)
        radii = zero_crossing_radius(out)
        assert np.abs(radii - (0.25 + T)).max() <= 1.5 * grid.spacing

    def test_shrink_circle(self, grid):
        ls = circle_sdf(grid)
        T = 20 * 0.5 * grid.spacing
        out = advect(ls, -np.ones(grid.shape), T)
        radii = zero_crossing_radius(out)
        assert np.abs(radii - (0.25 - T)).max() <= 1.5 * grid.spacing

    def test_area_change_bound(self, grid):
        ls = circle_sdf(grid)
        T = 5 * 0.5 * grid.spacing
        out = advect(ls, np.ones(grid.shape), T)
        area = lambda f: np.sum(f.phi < 0) * grid.dx * grid.dy
        per = 2 * np.pi * 0.25
        assert abs(area(out) - area(ls)) <= 1.0 * T * per * 1.5 + 4 * grid.dx * grid.dy


class TestReinit:
    def test_sdf_fixed_point_in_band(self, grid):
        ls = circle_sdf(grid)
        out = reinitialize(ls, 20)
        band = np.abs(ls.phi) <= 5 * grid.spacing
        assert np.abs(out.phi - ls.phi)[band].max() <= 1e-3

    def test_rescaled_recovers(self, grid):
        ls = circle_sdf(grid)
        out = reinitialize(LevelSetField(grid, 3 * ls.phi), 40)
        norms = out.band_gradient_norms()
        assert norms.min() >= 0.9 and norms.max() <= 1.1
        # zero level stays put
        assert np.abs(zero_crossing_radius(out) - 0.25).max() <= 0.25 * grid.spacing

    def test_steep_synthetic(self, grid):
        pts = grid.nodes()
        raw = np.tanh(4 * (np.linalg.norm(pts - [1, 0.5], axis=1) - 0.3))
        out = reinitialize(LevelSetField(grid, raw.reshape(grid.shape)), 60)
        norms = out.band_gradient_norms()
        assert norms.min() >= 0.9 and norms.max() <= 1.1


class TestCurvature:
    def test_circle(self, grid):
        ls = circle_sdf(grid)  # r = 0.25 = 20 cells
        angles = np.linspace(0, 2 * np.pi, 17)[:-1]
        pts = np.array([1.0, 0.5]) + 0.25 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        k = curvature(ls, pts)
        assert np.abs(k - 4.0).max() <= 0.05 * 4.0
        assert np.all(k > 0)  # negative-inside circle curves positively

    def test_straight_interface(self, grid):
        pts = grid.nodes()
        ls = LevelSetField(grid, (pts[:, 0] - 1.0).reshape(grid.shape))
        k = curvature(ls, np.array([[1.0, 0.3], [1.0, 0.7]]))
        assert np.abs(k).max() <= 1e-6 / grid.spacing

    def test_flat_gradient_raises(self, grid):
        ls = LevelSetField(grid, np.full(grid.shape, 1.0))
        with pytest.raises(ValueError):
            curvature(ls, np.array([[1.0, 0.5]]))


class TestCutMesh:
    def setup_method(self):
        self.grid = Grid(160, 80, (0, 0, 2, 1))
        self.cfg = BoundaryConfig((0, 0, 2, 1), neumann_span=(0.4, 0.6))

    def test_full_box_keeps_background(self):
        bg = rect_mesh(10, 5, (0, 0, 2, 1))
        ls = init_signed_distance({"kind": "full"}, self.grid)
        cm = cut_mesh(bg, ls, self.cfg)
        assert cm.area == pytest.approx(2.0, abs=1e-12)
        assert len(cm.triangles) == len(bg.triangles)

    def test_vertical_line_exact(self):
        bg = rect_mesh(5, 3, (0, 0, 2, 1))  # cut not aligned with mesh lines
        pts = self.grid.nodes()
        ls = LevelSetField(self.grid, (pts[:, 0] - 1.0).reshape(self.grid.shape))
        cm = cut_mesh(bg, ls, self.cfg)
        assert cm.area == pytest.approx(1.0, abs=1e-10)

    def test_circle_hole_area(self):
        bg = rect_mesh(50, 25, (0, 0, 2, 1))
        ls = init_signed_distance(
            {"kind": "holes", "holes": [{"center": (1.0, 0.5), "radius": 0.2}]}, self.grid)
        cm = cut_mesh(bg, ls, self.cfg)
        assert abs(cm.area - (2 - np.pi * 0.04)) <= 2 * self.grid.spacing * 2 * np.pi * 0.2

    def test_labels(self):
        bg = rect_mesh(50, 25, (0, 0, 2, 1))
        found = RigidFoundation.disk((1.0, -8.0), 8.0)
        cfg = BoundaryConfig((0, 0, 2, 1), neumann_span=(0.4, 0.6),
                             foundation=found, contact_distance=0.1)
        ls = init_signed_distance({"kind": "full"}, self.grid)
        cm = cut_mesh(bg, ls, cfg)
        mids = 0.5 * (cm.vertices[cm.facets[:, 0]] + cm.vertices[cm.facets[:, 1]])
        on_left = np.abs(mids[:, 0]) < 1e-9
        assert np.all(cm.facet_labels[on_left] == DIRICHLET)
        on_n = cm.facet_labels == NEUMANN
        assert np.all(np.abs(mids[on_n, 0] - 2.0) < 1e-9)
        assert np.all((mids[on_n, 1] > 0.39) & (mids[on_n, 1] < 0.61))
        bottom = np.abs(mids[:, 1]) < 1e-9
        assert np.all(cm.facet_labels[bottom] == CONTACT)
        # every facet gets exactly one label
        assert set(np.unique(cm.facet_labels)) <= {DIRICHLET, NEUMANN, CONTACT, FREE}

    def test_determinism(self):
        bg = rect_mesh(30, 15, (0, 0, 2, 1))
        ls = init_signed_distance(
            {"kind": "holes", "holes": [{"center": (0.8, 0.4), "radius": 0.17}]}, self.grid)
        a = cut_mesh(bg, ls, self.cfg)
        b = cut_mesh(bg, ls, self.cfg)
        assert np.array_equal(a.triangles, b.triangles)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.facet_labels, b.facet_labels)

    def test_cut_vertices_on_edges(self):
        bg = rect_mesh(30, 15, (0, 0, 2, 1))
        ls = init_signed_distance(
            {"kind": "holes", "holes": [{"center": (1.0, 0.5), "radius": 0.23}]}, self.grid)
        cm = cut_mesh(bg, ls, self.cfg)
        phi_v = ls.grid.interp(ls.phi, bg.vertices)
        for rec, v in zip(cm.provenance, cm.vertices):
            if rec[0] == "edge":
                _, a, b, s = rec
                pos = (1 - s) * bg.vertices[a] + s * bg.vertices[b]
                assert np.allclose(pos, v, atol=1e-12)
                interp = (1 - s) * phi_v[a] + s * phi_v[b]
                assert abs(interp) <= 1e-10 or s in (0.0, 1.0)

    def test_empty_dirichlet_raises(self):
        bg = rect_mesh(20, 10, (0, 0, 2, 1))
        # shape detached from the left wall
        pts = self.grid.nodes()
        ls = LevelSetField(self.grid, (0.5 - pts[:, 0]).reshape(self.grid.shape))
        with pytest.raises(InadmissibleShapeError):
            cut_mesh(bg, ls, self.cfg)

    def test_empty_mesh_raises(self):
        bg = rect_mesh(20, 10, (0, 0, 2, 1))
        pts = self.grid.nodes()
        ls = LevelSetField(self.grid, np.full(self.grid.shape, -1.0)
                           + (pts[:, 0] < 100).reshape(self.grid.shape) * 2.0)
        with pytest.raises(InadmissibleShapeError):
            cut_mesh(bg, ls, self.cfg)

    def test_area_consistency_random_shapes(self):
        rng = np.random.default_rng(42)
        bg = rect_mesh(40, 20, (0, 0, 2, 1))
        for _ in range(20):
            c = rng.uniform([0.4, 0.25], [1.6, 0.75])
            r = rng.uniform(0.08, 0.2)
            ls = init_signed_distance(
                {"kind": "holes", "holes": [{"center": tuple(c), "radius": r}]},
                self.grid, reinit_iters=0)
            cm = cut_mesh(bg, ls, self.cfg)
            grid_area = np.sum(ls.phi < 0) * self.grid.dx * self.grid.dy
            perimeter = 2 * (2 + 1) + 2 * np.pi * r
            assert abs(cm.area - grid_area) <= 2.5 * bg.h_mesh * perimeter
