"""Triangle mesh container and geometry helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

NORMAL_UNIT_TOL = 1e-4
DEGENERATE_AREA_TOL = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) meters
    triangles: np.ndarray  # (M, 3) int indices
    normals: np.ndarray  # (N, 3) unit vectors
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def validate(self) -> None:
        """Check container invariants; raises ValueError on violation."""
        if self.n_triangles and (self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices):
            raise ValueError("triangle indices out of range")
        if self.normals.shape != self.vertices.shape:
            raise ValueError("normals shape mismatch")
        if self.n_vertices:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > NORMAL_UNIT_TOL:
                raise ValueError("normals not unit length")
        if self.n_triangles and (self.triangle_areas() <= DEGENERATE_AREA_TOL).any():
            raise ValueError("degenerate triangles present")
        if self.colors is not None and self.colors.shape != self.vertices.shape:
            raise ValueError("colors shape mismatch")

    def triangle_areas(self) -> np.ndarray:
        v0 = self.vertices[self.triangles[:, 0]]
        v1 = self.vertices[self.triangles[:, 1]]
        v2 = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)

    def face_normals(self) -> np.ndarray:
        v0 = self.vertices[self.triangles[:, 0]]
        v1 = self.vertices[self.triangles[:, 1]]
        v2 = self.vertices[self.triangles[:, 2]]
        n = np.cross(v1 - v0, v2 - v0)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        return n / lens

    def edge_counts(self) -> dict[tuple[int, int], int]:
        """Occurrence count per undirected edge."""
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (int(min(a, b)), int(max(a, b)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        if self.is_empty():
            return False
        return all(c == 2 for c in self.edge_counts().values())

    def connected_component_count(self) -> int:
        """Components of the vertex graph induced by triangle edges
        (isolated vertices not referenced by any triangle are ignored)."""
        if self.is_empty():
            return 0
        i = np.concatenate([self.triangles[:, 0], self.triangles[:, 1], self.triangles[:, 2]])
        j = np.concatenate([self.triangles[:, 1], self.triangles[:, 2], self.triangles[:, 0]])
        adj = coo_matrix((np.ones(len(i)), (i, j)), shape=(self.n_vertices, self.n_vertices))
        n, labels = connected_components(adj, directed=False)
        used = np.zeros(self.n_vertices, dtype=bool)
        used[self.triangles.reshape(-1)] = True
        return len(np.unique(labels[used]))

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "TriangleMesh":
        verts = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        normals = self.normals @ np.asarray(rotation).T
        return TriangleMesh(verts, self.triangles.copy(), normals,
                            None if self.colors is None else self.colors.copy())

    def submesh(self, triangle_mask: np.ndarray) -> "TriangleMesh":
        """Mesh restricted to the selected triangles; unused vertices dropped."""
        tris = self.triangles[np.asarray(triangle_mask, dtype=bool)]
        used = np.unique(tris.reshape(-1))
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[tris], self.normals[used],
                            None if self.colors is None else self.colors[used])


def sample_surface_points(mesh: TriangleMesh, n_samples: int, rng: np.random.Generator):
    """Uniform area-weighted surface samples.

    Returns (points (n,3), normals (n,3)) with normals barycentrically
    interpolated from vertex normals.
    """
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    probs = areas / total
    tri_idx = rng.choice(len(areas), size=n_samples, p=probs)
    u = rng.random(n_samples)
    v = rng.random(n_samples)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    w = 1 - u - v
    tris = mesh.triangles[tri_idx]
    pts = (mesh.vertices[tris[:, 0]] * w[:, None]
           + mesh.vertices[tris[:, 1]] * u[:, None]
           + mesh.vertices[tris[:, 2]] * v[:, None])
    normals = (mesh.normals[tris[:, 0]] * w[:, None]
               + mesh.normals[tris[:, 1]] * u[:, None]
               + mesh.normals[tris[:, 2]] * v[:, None])
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens == 0] = 1.0
    return pts, normals / lens
