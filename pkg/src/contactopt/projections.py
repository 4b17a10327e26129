"""Scalar and ball projection operators and their generalized derivatives.

These are the nonsmooth building blocks of the penalized contact terms:
``pmax`` projects onto the nonnegative reals (normal penalty), ``qproj``
projects onto the ball of radius ``alpha`` (tangential / friction penalty).
Neither is Frechet differentiable, but both admit directional derivatives
(``dmax``, ``dq``) and piecewise-defined generalized Jacobians (``heaviside``,
``ball_jacobian``) used by the semismooth Newton solver and the
material-derivative problem.

In 2D the tangent space at a contact point is one-dimensional, so tangential
quantities ``z``, ``h`` are plain scalars (or arrays of scalars, elementwise).
All functions accept numpy arrays and broadcast.

Tie-breaking at the nonsmooth sets (``y = 0`` for the Heaviside, ``|z| = alpha``
for the ball) assigns the identity-type branch: ``heaviside(0) = 0`` and ties
in ``ball_jacobian`` are reported as region ``"J0"`` but carry the sticking
(identity) Jacobian. Both choices keep the assembled tangent bilinear form
symmetric positive semidefinite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "pmax",
    "dmax",
    "qproj",
    "dq",
    "heaviside",
    "ball_jacobian",
    "BallProjectionJacobian",
]


def pmax(y):
    """Projection onto R+, i.e. the positive part max{0, y}."""
    return np.maximum(0.0, y)


def dmax(u, v):
    """Directional derivative of ``pmax`` at ``u`` in the direction ``v``.

    Piecewise: 0 for u < 0, pmax(v) for u = 0, v for u > 0.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.where(u > 0.0, v, 0.0)
    out = np.where(u == 0.0, pmax(v), out)
    if out.ndim == 0:
        return float(out)
    return out


def _check_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0.0):
        raise ValueError("ball radius alpha must be strictly positive")
    return alpha


def qproj(alpha, z):
    """Projection of ``z`` onto the ball of radius ``alpha`` (scalar tangent).

    Returns z if |z| <= alpha, else alpha * z/|z|.  Requires alpha > 0.
    """
    alpha = _check_alpha(alpha)
    z = np.asarray(z, dtype=float)
    out = np.clip(z, -alpha, alpha)
    if out.ndim == 0:
        return float(out)
    return out


def dq(alpha, z, beta, h):
    """Directional derivative of ``qproj`` at (alpha, z) along (beta, h).

    Piecewise over the three regions of the (alpha, z) plane:

    * |z| < alpha:  h
    * |z| = alpha:  h - pmax(h * z/|z| - beta) * z/|z|
    * |z| > alpha:  (alpha/|z|) * (h - (z.h) z / |z|^2) + beta * z/|z|

    which in the scalar (2D) case collapses to ``beta * sign(z)`` on the
    outside region.  Satisfies |dq| <= |beta| + |h| everywhere.
    """
    alpha = _check_alpha(alpha)
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    h = np.asarray(h, dtype=float)
    az = np.abs(z)
    # sign(z) is safe here: the tie set |z| = alpha > 0 excludes z = 0
    sz = np.sign(z)
    inside = h
    tie = h - pmax(h * sz - beta) * sz
    outside = beta * sz  # (alpha/|z|)(h - h) + beta z/|z| in d=2
    out = np.where(az < alpha, inside, np.where(az > alpha, outside, tie))
    if out.ndim == 0:
        return float(out)
    return out


def heaviside(y):
    """Heaviside function with H(0) = 0 (tie assigned to the inactive branch)."""
    y = np.asarray(y, dtype=float)
    out = np.where(y > 0.0, 1.0, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class BallProjectionJacobian:
    """Generalized Jacobian of ``qproj`` at (alpha, z), scalar 2D version.

    ``region`` is one of ``"J-"`` (|z| < alpha), ``"J0"`` (tie within
    tolerance) or ``"J+"`` (|z| > alpha).  ``d_alpha`` and ``d_z`` are the
    partial derivatives used in assembly; tie points carry the ``J-``
    (identity) values.
    """

    region: str
    d_alpha: float
    d_z: float


def ball_jacobian(alpha: float, z: float, tie_tol: float = 1e-12) -> BallProjectionJacobian:
    """Classify (alpha, z) and return the assembly Jacobian of ``qproj``.

    The tie test is relative: | |z| - alpha | <= tie_tol * alpha.
    """
    alpha = float(alpha)
    if alpha <= 0.0:
        raise ValueError("ball radius alpha must be strictly positive")
    if tie_tol < 0.0:
        raise ValueError("tie_tol must be nonnegative")
    az = abs(float(z))
    if abs(az - alpha) <= tie_tol * alpha:
        # reported as a tie, assembled with the sticking (identity) Jacobian
        return BallProjectionJacobian("J0", 0.0, 1.0)
    if az < alpha:
        return BallProjectionJacobian("J-", 0.0, 1.0)
    # |z| > alpha: d_z = (alpha/|z|)(1 - z^2/|z|^2) = 0 in d=2
    return BallProjectionJacobian("J+", float(np.sign(z)), 0.0)


def dq_branches(alpha, z, tie_tol: float = 1e-12):
    """Vectorized assembly branches of the ball projection.

    Returns ``(d_alpha, d_z, is_tie)`` arrays for quadrature-point data,
    applying the same tie rule as :func:`ball_jacobian`.  Points with
    ``alpha <= 0`` (vanishing friction threshold) get ``d_alpha = d_z = 0``:
    the tangential penalty is absent there and the caller is expected to have
    zeroed the corresponding stresses.
    """
    alpha = np.asarray(alpha, dtype=float)
    z = np.asarray(z, dtype=float)
    az = np.abs(z)
    active = alpha > 0.0
    tie = active & (np.abs(az - alpha) <= tie_tol * alpha)
    inside = active & (az < alpha)
    d_z = np.where(inside | tie, 1.0, 0.0)
    d_alpha = np.where(active & (az > alpha) & ~tie, np.sign(z), 0.0)
    return d_alpha, d_z, tie
