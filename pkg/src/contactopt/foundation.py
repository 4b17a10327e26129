"""Analytic geometry of the rigid obstacle.

The obstacle enters the contact terms only through its oriented distance
``gap`` (positive outside the rigid body, zero on its boundary, negative
inside), the inward normal ``n = -grad(gap)`` and the normal's spatial
gradient, which feeds the transport terms of the shape derivative.

Half-planes and disks are handled analytically everywhere.  Arbitrary
obstacles can be supplied as a sampled signed-distance grid with bilinear
interpolation; those are only trusted inside a band ``|gap| < band`` around
the obstacle boundary and queries outside the band fail loudly.
"""

from __future__ import annotations

import numpy as np

__all__ = ["RigidFoundation", "read_sdf_grid", "write_sdf_grid"]


class EvaluationBandError(ValueError):
    """Raised for sampled-SDF queries outside the trusted band."""


class RigidFoundation:
    """Rigid obstacle described by its oriented distance function.

    Construct through one of the classmethods :meth:`half_plane`,
    :meth:`disk` or :meth:`from_sampled`.  Instances are immutable and safe
    for concurrent reads.

    Sign convention: ``gap > 0`` strictly outside the rigid body, ``= 0`` on
    its boundary, ``< 0`` inside.  ``sign=-1`` flips inside and outside.
    """

    def __init__(self, kind, *, normal=None, offset=None, center=None, radius=None,
                 grid=None, band=None, sign=1.0):
        self.kind = kind
        self.sign = float(sign)
        self.band = band  # trusted half-width around the boundary; None = everywhere
        if kind == "half_plane":
            m = np.asarray(normal, dtype=float)
            self._m = m / np.linalg.norm(m)
            self._offset = float(offset)
        elif kind == "disk":
            self._center = np.asarray(center, dtype=float)
            self._radius = float(radius)
            if self._radius <= 0.0:
                raise ValueError("disk radius must be positive")
        elif kind == "sampled":
            # grid = (x0, y0, dx, dy, values[nx, ny]); values indexed [i, j]
            self._grid = grid
            if band is None:
                raise ValueError("sampled foundations require an evaluation band")
        else:
            raise ValueError(f"unknown foundation kind {kind!r}")

    @classmethod
    def half_plane(cls, normal=(0.0, 1.0), offset=0.0, sign=1.0):
        """Half-plane obstacle; ``normal`` points into the outside region.

        gap(x) = normal . x - offset, so with the default arguments the
        region {y >= 0} is outside and the inward normal is (0, -1).
        """
        return cls("half_plane", normal=normal, offset=offset, sign=sign)

    @classmethod
    def disk(cls, center, radius, sign=1.0):
        """Disk obstacle: gap(x) = |x - center| - radius."""
        return cls("disk", center=center, radius=radius, sign=sign)

    @classmethod
    def from_sampled(cls, x0, y0, dx, dy, values, band, sign=1.0):
        """Obstacle from signed-distance samples on a regular grid.

        ``values[i, j]`` is the oriented distance at ``(x0 + i*dx, y0 + j*dy)``.
        Queries are valid only where ``|gap| < band``; the interpolation is
        bilinear, so the unit-gradient property holds only approximately.
        """
        values = np.asarray(values, dtype=float)
        if values.ndim != 2:
            raise ValueError("sampled SDF values must be 2-dimensional")
        grid = (float(x0), float(y0), float(dx), float(dy), values)
        return cls("sampled", grid=grid, band=float(band), sign=sign)

    @classmethod
    def from_grid_file(cls, path, band, sign=1.0):
        """Load a sampled foundation from the plain-text grid format."""
        x0, y0, dx, dy, values = read_sdf_grid(path)
        return cls.from_sampled(x0, y0, dx, dy, values, band=band, sign=sign)

    # -- queries ----------------------------------------------------------

    def gap(self, x):
        """Oriented distance to the obstacle boundary at point(s) ``x``.

        ``x`` may be a single point (2,) or an array of points (n, 2).
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        g = self._gap(pts)
        return float(g[0]) if single else g

    def inward_normal(self, x):
        """Unit inward normal of the rigid body, ``-grad(gap)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        n = -self._grad_gap(pts)
        return n[0] if single else n

    def grad_gap(self, x):
        """Gradient of the gap (unit length for analytic shapes)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        g = self._grad_gap(np.atleast_2d(x))
        return g[0] if single else g

    def normal_jacobian(self, x):
        """Spatial gradient of the inward normal, shape (..., 2, 2).

        Entry [i, j] is d n_i / d x_j.  Zero for half-planes; for the disk it
        is -(I - r_hat r_hat^T)/|x - c| (with the default sign convention).
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        J = self._normal_jacobian(pts)
        return J[0] if single else J

    # -- kind-specific internals ------------------------------------------

    def _gap(self, pts):
        if self.kind == "half_plane":
            return self.sign * (pts @ self._m - self._offset)
        if self.kind == "disk":
            r = np.linalg.norm(pts - self._center, axis=1)
            return self.sign * (r - self._radius)
        return self.sign * self._interp(pts, deriv=False)

    def _grad_gap(self, pts):
        if self.kind == "half_plane":
            return self.sign * np.broadcast_to(self._m, pts.shape).copy()
        if self.kind == "disk":
            d = pts - self._center
            r = np.linalg.norm(d, axis=1)
            if np.any(r == 0.0):
                raise ValueError("gradient singular at the disk center")
            return self.sign * d / r[:, None]
        return self.sign * self._interp(pts, deriv=True)

    def _normal_jacobian(self, pts):
        n = len(pts)
        if self.kind == "half_plane":
            return np.zeros((n, 2, 2))
        if self.kind == "disk":
            d = pts - self._center
            r = np.linalg.norm(d, axis=1)
            if np.any(r == 0.0):
                raise ValueError("gradient singular at the disk center")
            rhat = d / r[:, None]
            eye = np.eye(2)[None, :, :]
            proj = eye - rhat[:, :, None] * rhat[:, None, :]
            return -self.sign * proj / r[:, None, None]
        # sampled: centered differences of the interpolated normal
        h = 1e-6 * max(self._grid[2], self._grid[3])
        J = np.zeros((n, 2, 2))
        for j, e in enumerate(np.eye(2)):
            np_plus = -self._grad_gap(pts + h * e)
            np_minus = -self._grad_gap(pts - h * e)
            J[:, :, j] = (np_plus - np_minus) / (2 * h)
        return J

    def _interp(self, pts, deriv):
        x0, y0, dx, dy, vals = self._grid
        nx, ny = vals.shape
        fx = (pts[:, 0] - x0) / dx
        fy = (pts[:, 1] - y0) / dy
        i = np.clip(np.floor(fx).astype(int), 0, nx - 2)
        j = np.clip(np.floor(fy).astype(int), 0, ny - 2)
        if np.any(fx < -1e-12) or np.any(fx > nx - 1 + 1e-12) or \
           np.any(fy < -1e-12) or np.any(fy > ny - 1 + 1e-12):
            raise EvaluationBandError("query outside the sampled SDF grid")
        s = fx - i
        t = fy - j
        v00 = vals[i, j]
        v10 = vals[i + 1, j]
        v01 = vals[i, j + 1]
        v11 = vals[i + 1, j + 1]
        g = (1 - s) * (1 - t) * v00 + s * (1 - t) * v10 + (1 - s) * t * v01 + s * t * v11
        if np.any(np.abs(g) >= self.band):
            raise EvaluationBandError(
                "sampled SDF queried outside its evaluation band "
                f"(|gap| < {self.band})")
        if not deriv:
            return g
        gx = ((1 - t) * (v10 - v00) + t * (v11 - v01)) / dx
        gy = ((1 - s) * (v01 - v00) + s * (v11 - v10)) / dy
        return np.stack([gx, gy], axis=1)


def read_sdf_grid(path):
    """Read the plain-text SDF grid format.

    Header line: ``nx ny x0 y0 dx dy``; then ``nx * ny`` values, row-major
    (the row index is the x index, so value ``k`` belongs to
    ``i = k // ny``, ``j = k % ny``).
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    nx, ny = int(tokens[0]), int(tokens[1])
    x0, y0, dx, dy = (float(t) for t in tokens[2:6])
    data = np.array([float(t) for t in tokens[6:6 + nx * ny]])
    if data.size != nx * ny:
        raise ValueError("SDF grid file truncated")
    return x0, y0, dx, dy, data.reshape(nx, ny)


def write_sdf_grid(path, x0, y0, dx, dy, values):
    """Write the plain-text SDF grid format (see :func:`read_sdf_grid`)."""
    values = np.asarray(values, dtype=float)
    nx, ny = values.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{nx} {ny} {float(x0)!r} {float(y0)!r} {float(dx)!r} {float(dy)!r}\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
