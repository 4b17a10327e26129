import numpy as np
import pytest
import scipy.sparse as sp

from contactopt.fem import (FeSpace, LoadData, MaterialModel, apply_dirichlet,
                            assemble_elasticity, assemble_load, gauss_segment,
                            lame_from_engineering, solve_spd, triangle_rule)
from contactopt.mesh import DIRICHLET, FREE, NEUMANN, TriMesh, read_mesh, rect_mesh, write_mesh


def test_lame_values():
    lam, mu = lame_from_engineering(1.0, 0.3)
    assert lam == pytest.approx(0.576923, abs=1e-6)
    assert mu == pytest.approx(0.384615, abs=1e-6)
    assert lame_from_engineering(1.0, 0.0) == (0.0, 0.5)
    lam, mu = lame_from_engineering(210.0, 0.3)
    assert (lam, mu) == (pytest.approx(121.153846, abs=1e-6),
                         pytest.approx(80.769231, abs=1e-6))
    with pytest.raises(ValueError):
        lame_from_engineering(-1.0, 0.3)
    with pytest.raises(ValueError):
        lame_from_engineering(1.0, 0.5)


@pytest.mark.parametrize("degree", [1, 2])
def test_rigid_body_kernel(degree):
    mesh = rect_mesh(3, 2, (0, 0, 1.5, 1.0))
    space = FeSpace(mesh, degree)
    K = assemble_elasticity(space, MaterialModel(1.0, 0.3))
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    modes = [np.tile([1.0, 0.0], space.ndof), np.tile([0.0, 1.0], space.ndof),
             np.stack([-y, x], axis=1).ravel()]
    scale = abs(K).max()
    for v in modes:
        assert np.abs(K @ v).max() <= 1e-10 * scale * np.abs(v).max()


def test_symmetry():
    mesh = rect_mesh(4, 3)
    K = assemble_elasticity(FeSpace(mesh, 2), MaterialModel(2.0, 0.25))
    assert abs(K - K.T).max() <= 1e-14 * abs(K).max()


def test_patch_energy():
    mesh = rect_mesh(1, 1)
    space = FeSpace(mesh, 2)
    mat = MaterialModel(1.0, 0.3)
    K = assemble_elasticity(space, mat)
    v = np.zeros(2 * space.ndof)
    v[0::2] = space.dof_coords[:, 0]  # uniform strain exx = 1
    lam, mu = mat.lame
    assert 0.5 * v @ K @ v == pytest.approx(0.5 * (lam + 2 * mu), rel=1e-12)
    assert 0.5 * v @ K @ v == pytest.approx(0.673077, abs=1e-6)


def test_quadrature_exactness():
    pts, w = triangle_rule(4)
    # reference-triangle monomial integrals: x^a y^b -> a! b! / (a+b+2)!
    import math
    for a in range(5):
        for b in range(5 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            approx = 0.5 * np.sum(w * pts[:, 0]**a * pts[:, 1]**b)
            assert approx == pytest.approx(exact, rel=1e-13)
    t, wt = gauss_segment(5)
    for a in range(10):
        assert np.sum(wt * t**a) == pytest.approx(1.0 / (a + 1), rel=1e-13)


def test_load_assembly():
    mesh = rect_mesh(2, 2)
    space = FeSpace(mesh, 2)
    F = assemble_load(space, LoadData(body_force=(0.0, -1.0)))
    vy = np.zeros(2 * space.ndof)
    vy[1::2] = 1.0
    assert F @ vy == pytest.approx(-1.0, rel=1e-12)

    # traction on one facet of length 0.8
    m2 = rect_mesh(1, 1, (0, 0, 0.8, 0.8))
    mids = 0.5 * (m2.vertices[m2.facets[:, 0]] + m2.vertices[m2.facets[:, 1]])
    m2.facet_labels = np.where(np.abs(mids[:, 1]) < 1e-12, NEUMANN, FREE)
    s2 = FeSpace(m2, 2)
    F2 = assemble_load(s2, LoadData(traction=(0.0, -0.01)))
    vy2 = np.zeros(2 * s2.ndof)
    vy2[1::2] = 1.0
    assert F2 @ vy2 == pytest.approx(-0.008, rel=1e-12)

    assert np.all(assemble_load(space, LoadData()) == 0.0)


def _manufactured(mat, degree):
    lam, mu = mat.lame
    if degree == 1:
        # u = (x^2, x y): f = -(3 lam + 5 mu, 0)
        exact = lambda p: np.stack([p[:, 0]**2, p[:, 0] * p[:, 1]], axis=1)
        body = lambda p: np.broadcast_to([-(3 * lam + 5 * mu), 0.0], (len(p), 2)).copy()
    else:
        # u = (x^4, y^4)
        exact = lambda p: np.stack([p[:, 0]**4, p[:, 1]**4], axis=1)
        body = lambda p: np.stack([-(24 * mu + 12 * lam) * p[:, 0]**2,
                                   -(24 * mu + 12 * lam) * p[:, 1]**2], axis=1)
    return exact, body


@pytest.mark.parametrize("degree", [1, 2])
def test_manufactured_convergence(degree):
    mat = MaterialModel(1.0, 0.3)
    exact, body = _manufactured(mat, degree)
    errs = []
    for n in (4, 8, 16):
        mesh = rect_mesh(n, n)
        mesh.facet_labels[:] = DIRICHLET
        space = FeSpace(mesh, degree)
        K = assemble_elasticity(space, mat)
        F = assemble_load(space, LoadData(body_force=body))
        mask = space.dirichlet_mask()
        vals = np.zeros(2 * space.ndof)
        ex = exact(space.dof_coords)
        vals[0::2], vals[1::2] = ex[:, 0], ex[:, 1]
        Kd, Fd = apply_dirichlet(K, F, mask, np.where(mask, vals, 0.0))
        u = solve_spd(Kd, Fd)
        # L2 error through element quadrature
        pts, w = triangle_rule(2 * degree)
        N, _ = space.shape(pts[:, 0], pts[:, 1])
        lamb = np.stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=1)
        p3 = mesh.vertices[mesh.triangles]
        xq = np.einsum("qa,tac->tqc", lamb, p3).reshape(-1, 2)
        uh = np.einsum("qa,tac->tqc", N, u.reshape(-1, 2)[space.cell_dofs]).reshape(-1, 2)
        wq = (w[None, :] * 0.5 * np.abs(space.detJ)[:, None]).reshape(-1)
        err = np.sqrt(np.sum(wq * np.sum((uh - exact(xq))**2, axis=1)))
        errs.append(err)
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > degree + 0.7)


def test_solve_spd():
    assert np.allclose(solve_spd(sp.identity(2, format="csr"), np.array([1.0, 2.0])),
                       [1.0, 2.0])
    K = sp.diags([2.0, 4.0]).tocsr()
    assert np.allclose(solve_spd(K, np.array([2.0, 4.0])), [1.0, 1.0])
    rng = np.random.default_rng(42)
    A = rng.standard_normal((50, 50))
    K = sp.csr_matrix(A @ A.T + 50 * np.eye(50))
    F = rng.standard_normal(50)
    x = solve_spd(K, F)
    assert np.linalg.norm(K @ x - F) <= 1e-10 * np.linalg.norm(F)


def test_mesh_text_roundtrip(tmp_path):
    mesh = rect_mesh(3, 2, (0, 0, 2, 1))
    mids = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    mesh.facet_labels = np.where(np.abs(mids[:, 0]) < 1e-12, DIRICHLET, FREE)
    path = tmp_path / "mesh.txt"
    write_mesh(path, mesh)
    back = read_mesh(path)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.allclose(back.vertices, mesh.vertices)
    assert np.array_equal(back.facet_labels, mesh.facet_labels)


def test_facet_normals_outward():
    mesh = rect_mesh(3, 3, (0, 0, 1, 1))
    n = mesh.facet_normals()
    mids = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    owner = mesh.facet_owners()
    centroids = mesh.vertices[mesh.triangles[owner]].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, mids - centroids) > 0)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)


def test_degenerate_triangle_rejected():
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(ValueError):
        TriMesh(verts, [[0, 1, 2]], np.empty((0, 2), int), np.empty(0, int))
