"""Marching cubes over an explicit list of grid cells.

Works directly on sparse cell sets so octree extraction only pays for
refined cells; the dense baseline feeds every cell through the same
code, which makes octree-vs-dense comparisons exact on shared cells.
"""

from __future__ import annotations

import numpy as np

from ..mesh import TriangleMesh
from .mc_tables import EDGE_TABLE, TRI_TABLE

# Corner offsets in the classic table convention.
CORNER_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)

# Edge endpoints as corner-index pairs.
EDGE_CORNERS = np.array([
    [0, 1], [1, 2], [2, 3], [3, 0],
    [4, 5], [5, 6], [6, 7], [7, 4],
    [0, 4], [1, 5], [2, 6], [3, 7],
], dtype=np.int64)

# Canonical edge key: (lattice point of the lower endpoint, axis).
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)
_EDGE_BASE_CORNER = np.array([0, 1, 3, 0, 4, 5, 7, 4, 0, 1, 2, 3], dtype=np.int64)


def marching_cubes_cells(cells: np.ndarray, lattice_values: np.ndarray,
                         origin: np.ndarray, spacing: np.ndarray,
                         iso: float = 0.5) -> TriangleMesh:
    """Triangulate the iso-surface within the given cells.

    cells: (M, 3) integer base-corner indices into the value lattice.
    lattice_values: dense (Nx, Ny, Nz) scalar field (only the corners of
    the given cells are read). Vertex normals are area-weighted face
    normals oriented toward decreasing field value (outside).
    """
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if len(cells) == 0:
        return TriangleMesh.empty()
    origin = np.asarray(origin, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))

    corner_idx = cells[:, None, :] + CORNER_OFFSETS[None, :, :]  # (M, 8, 3)
    vals = lattice_values[corner_idx[:, :, 0], corner_idx[:, :, 1],
                          corner_idx[:, :, 2]].astype(np.float64)  # (M, 8)
    # symbolic perturbation: corners exactly on the iso level would
    # otherwise spawn degenerate triangles whose removal opens cracks
    vals = np.where(vals == iso, iso + 1e-12, vals)
    inside = vals < iso  # classic convention: bit set when below iso
    case = (inside << np.arange(8)).sum(axis=1)

    active = EDGE_TABLE[case] != 0
    if not active.any():
        return TriangleMesh.empty()
    cells = cells[active]
    vals = vals[active]
    case = case[active]
    m = len(cells)

    # Global edge ids for every cell edge: encode (point, axis).
    nx, ny, nz = lattice_values.shape
    base_pts = cells[:, None, :] + CORNER_OFFSETS[_EDGE_BASE_CORNER][None, :, :]  # (M,12,3)
    edge_ids = (((base_pts[:, :, 0] * ny + base_pts[:, :, 1]) * nz
                 + base_pts[:, :, 2]) * 3 + _EDGE_AXIS[None, :])  # (M, 12)

    tri_edges = TRI_TABLE[case]  # (M, 16) local edge ids, -1 padded
    valid_tri = tri_edges >= 0
    counts = valid_tri.sum(axis=1)
    flat_local = tri_edges[valid_tri]  # all triangle corner slots, in order
    flat_cell = np.repeat(np.arange(m), counts)
    flat_global = edge_ids[flat_cell, flat_local]

    unique_edges, tri_flat = np.unique(flat_global, return_inverse=True)
    triangles = tri_flat.reshape(-1, 3)

    # Vertex positions: linear interpolation along each unique edge.
    pt = np.empty((len(unique_edges), 3), dtype=np.int64)
    axis = unique_edges % 3
    rest = unique_edges // 3
    pt[:, 2] = rest % nz
    rest //= nz
    pt[:, 1] = rest % ny
    pt[:, 0] = rest // ny
    pt2 = pt.copy()
    pt2[np.arange(len(pt)), axis] += 1
    v1 = lattice_values[pt[:, 0], pt[:, 1], pt[:, 2]].astype(np.float64)
    v2 = lattice_values[pt2[:, 0], pt2[:, 1], pt2[:, 2]].astype(np.float64)
    v1 = np.where(v1 == iso, iso + 1e-12, v1)
    v2 = np.where(v2 == iso, iso + 1e-12, v2)
    denom = v2 - v1
    t = np.where(np.abs(denom) > 1e-30, (iso - v1) / np.where(denom == 0, 1, denom), 0.5)
    # snapping away from the endpoints keeps triangles non-degenerate
    t = np.clip(t, 1e-4, 1.0 - 1e-4)
    verts = origin + (pt + t[:, None] * (pt2 - pt)) * spacing

    # drop degenerate triangles (repeated vertices or zero area)
    a = verts[triangles[:, 0]]
    b = verts[triangles[:, 1]]
    c = verts[triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    triangles = triangles[areas > 1e-12]
    if len(triangles) == 0:
        return TriangleMesh.empty()
    used = np.unique(triangles.reshape(-1))
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    triangles = remap[triangles]

    # Vertex normals from area-weighted face normals; the classic tables
    # with the below-iso convention wind triangles toward the low side,
    # i.e. outward for occupancy fields (verified against the gradient).
    fn = np.cross(verts[triangles[:, 1]] - verts[triangles[:, 0]],
                  verts[triangles[:, 2]] - verts[triangles[:, 0]])
    normals = np.zeros_like(verts)
    for k in range(3):
        np.add.at(normals, triangles[:, k], fn)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens < 1e-20] = 1.0
    normals = normals / lens
    return TriangleMesh(verts, triangles, normals)
