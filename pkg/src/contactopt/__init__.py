"""2D shape optimization of elastic bodies in penalized Tresca contact.

The package couples a triangle finite element solver for the penalized
frictional contact problem with adjoint-based shape derivatives and a
level-set description of the evolving design.  See README.md for an
overview and demos/ for runnable walkthroughs.
"""

from .foundation import RigidFoundation
from .mesh import CONTACT, DIRICHLET, FREE, NEUMANN, TriMesh, rect_mesh
from .fem import (FeSpace, Field, LoadData, MaterialModel,
                  assemble_elasticity, assemble_load, apply_dirichlet,
                  lame_from_engineering, solve_spd)
from .projections import (ball_jacobian, dmax, dq, heaviside, pmax, qproj)

__all__ = [
    "RigidFoundation", "TriMesh", "rect_mesh",
    "DIRICHLET", "NEUMANN", "CONTACT", "FREE",
    "FeSpace", "Field", "LoadData", "MaterialModel",
    "assemble_elasticity", "assemble_load", "apply_dirichlet",
    "lame_from_engineering", "solve_spd",
    "pmax", "dmax", "qproj", "dq", "heaviside", "ball_jacobian",
]

__version__ = "0.1.0"
