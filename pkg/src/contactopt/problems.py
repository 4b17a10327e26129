"""Ready-made benchmark problems shared by tests, checks and demos."""

from __future__ import annotations

import numpy as np

from .contact import ContactProblem, FrictionModel, SolverConfig
from .fem import FeSpace, LoadData, MaterialModel
from .foundation import RigidFoundation
from .mesh import CONTACT, FREE, NEUMANN, TriMesh, rect_mesh
from .optimize import OptimizationConfig

__all__ = ["pressed_strip", "strip_nudge", "cantilever_config"]


def pressed_strip(nx=10, ny=3, height=0.25, pressure=0.01, eps=1e-6, nu=0.3,
                  model="tresca", friction=(0.5, 0.02), degree=2,
                  deform=None, pin_left_x=True, clamp_left=False):
    """Rectangular strip resting on the half-plane {y <= 0}, pressed from above.

    The top edge carries the uniform traction (0, -pressure), the bottom edge
    is the contact boundary at zero initial gap.  With the default stick
    friction the converged state has uniform contact pressure and penetration
    eps * pressure, which serves as an exact force-balance oracle.

    ``deform(vertices) -> displacement`` optionally transports the mesh
    (perturbation of identity) for finite-difference shape-derivative checks;
    boundary labels are assigned before the transport.
    """
    mesh = rect_mesh(nx, ny, bounds=(0.0, 0.0, 1.0, height))
    mids = 0.5 * (mesh.vertices[mesh.facets[:, 0]] + mesh.vertices[mesh.facets[:, 1]])
    labels = np.full(len(mesh.facets), FREE)
    labels[np.abs(mids[:, 1] - height) < 1e-12] = NEUMANN
    labels[np.abs(mids[:, 1]) < 1e-12] = CONTACT
    verts = mesh.vertices
    if deform is not None:
        verts = verts + deform(verts)
    mesh = TriMesh(verts, mesh.triangles, mesh.facets, labels)
    space = FeSpace(mesh, degree)
    fix = np.zeros(2 * space.ndof, dtype=bool)
    left = np.abs(space.dof_coords[:, 0]) < 1e-9
    if pin_left_x:
        fix[0::2] = left
    if clamp_left:
        fix[0::2] = left
        fix[1::2] = left
    problem = ContactProblem(
        space, MaterialModel(1.0, nu), LoadData(traction=(0.0, -pressure)),
        FrictionModel(*friction), RigidFoundation.half_plane(),
        SolverConfig(eps=eps), model=model, extra_fixed=fix)
    return problem


def strip_nudge(space, depth=1e-9):
    """Initial guess pushing the strip into the contact branch.

    At zero displacement every bottom point sits exactly on the obstacle, so
    the Heaviside tie rule leaves the normal penalty out of the first
    Jacobian; a vanishing downward shift selects the physical branch.
    """
    u0 = np.zeros(2 * space.ndof)
    u0[1::2] = -depth
    return u0


def cantilever_config(model="tresca", **overrides) -> OptimizationConfig:
    """The 2D cantilever-over-a-disk benchmark configuration.

    Box [0, 2] x [0, 1] clamped on the left edge, pulled down by the traction
    (0, -0.01) on the middle fifth of the right edge, optionally supported by
    the rigid disk of radius 8 centered at (1, -8) that touches the bottom
    edge at (1, 0).  Friction threshold 1e-2 with coefficient 0.2; objective
    weights 15 (compliance) and 0.01 (volume); penalty 1e-6.
    """
    cfg = OptimizationConfig(model=model)
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg
