"""Legacy ASCII VTK writers for meshes, nodal fields and grid snapshots."""

from __future__ import annotations

import numpy as np

__all__ = ["write_unstructured", "write_structured_points"]


def _format_rows(fh, arr, per_line=1):
    arr = np.asarray(arr)
    for row in arr.reshape(arr.shape[0], -1):
        fh.write(" ".join(f"{v:.10g}" for v in row) + "\n")


def write_unstructured(path, mesh, point_data=None, facet_data=None):
    """Write a TriMesh as an unstructured grid.

    ``point_data`` maps names to (nv,) scalars or (nv, 2) vectors (padded to
    3 components).  ``facet_data`` maps names to per-boundary-facet scalars;
    facets are emitted as line cells after the triangles and triangle rows of
    facet arrays are filled with -1.
    """
    point_data = point_data or {}
    facet_data = facet_data or {}
    nv = len(mesh.vertices)
    nt = len(mesh.triangles)
    nf = len(mesh.facets) if facet_data else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\ncontactopt mesh\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        _format_rows(fh, np.column_stack([mesh.vertices, np.zeros(nv)]))
        ncells = nt + nf
        fh.write(f"CELLS {ncells} {4 * nt + 3 * nf}\n")
        for tri in mesh.triangles:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        if nf:
            for a, b in mesh.facets:
                fh.write(f"2 {a} {b}\n")
        fh.write(f"CELL_TYPES {ncells}\n")
        fh.write("\n".join(["5"] * nt + ["3"] * nf) + "\n")
        if point_data:
            fh.write(f"POINT_DATA {nv}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 2:
                    fh.write(f"VECTORS {name} double\n")
                    _format_rows(fh, np.column_stack([arr, np.zeros(len(arr))]))
                else:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    _format_rows(fh, arr.reshape(-1, 1))
        if facet_data:
            fh.write(f"CELL_DATA {ncells}\n")
            for name, arr in facet_data.items():
                arr = np.asarray(arr, dtype=float)
                full = np.concatenate([np.full(nt, -1.0), arr])
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                _format_rows(fh, full.reshape(-1, 1))


def write_structured_points(path, grid, fields):
    """Write nodal grid fields (e.g. the level set) as STRUCTURED_POINTS."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\ncontactopt grid\nASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {grid.nx + 1} {grid.ny + 1} 1\n")
        fh.write(f"ORIGIN {grid.x0} {grid.y0} 0\n")
        fh.write(f"SPACING {grid.dx} {grid.dy} 1\n")
        fh.write(f"POINT_DATA {(grid.nx + 1) * (grid.ny + 1)}\n")
        for name, arr in fields.items():
            arr = np.asarray(arr).reshape(grid.shape)
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            # VTK structured points iterate x fastest
            for j in range(grid.ny + 1):
                fh.write(" ".join(f"{arr[i, j]:.10g}" for i in range(grid.nx + 1)) + "\n")
