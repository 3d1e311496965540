"""Geometry evaluation: point-to-surface, Chamfer, normal consistency.

Distances are exact point-to-triangle, accelerated by a bounding-volume
hierarchy; sampling is uniform by area with a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .mesh import TriangleMesh, sample_surface_points
from .rng import substream

N_SAMPLES_DEFAULT = 100_000
_LEAF_SIZE = 8


class UndefinedMetricError(ValueError):
    """Metric on an empty mesh."""


@dataclass(frozen=True)
class MeshMetrics:
    p2s: float
    chamfer: float
    normal_consistency: float

    def __post_init__(self):
        if self.p2s < 0 or self.chamfer < 0 or self.normal_consistency > 1 + 1e-9:
            raise ValueError("metric out of range")


@njit(cache=True, inline="always")
def _closest_point_on_triangle(p, a, b, c):
    """Ericson-style closest point; returns (x, y, z) of the closest point."""
    ab0 = b[0] - a[0]
    ab1 = b[1] - a[1]
    ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]
    ac1 = c[1] - a[1]
    ac2 = c[2] - a[2]
    ap0 = p[0] - a[0]
    ap1 = p[1] - a[1]
    ap2 = p[2] - a[2]

    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return a[0], a[1], a[2]

    bp0 = p[0] - b[0]
    bp1 = p[1] - b[1]
    bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return b[0], b[1], b[2]

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a[0] + v * ab0, a[1] + v * ab1, a[2] + v * ab2

    cp0 = p[0] - c[0]
    cp1 = p[1] - c[1]
    cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return c[0], c[1], c[2]

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a[0] + w * ac0, a[1] + w * ac1, a[2] + w * ac2

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]),
                b[2] + w * (c[2] - b[2]))

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (a[0] + ab0 * v + ac0 * w, a[1] + ab1 * v + ac1 * w,
            a[2] + ab2 * v + ac2 * w)


@njit(cache=True)
def _bvh_query(points, tri_verts, bbox_min, bbox_max, left, right, start, count,
               tri_order):
    n = len(points)
    best_d2 = np.full(n, np.inf)
    best_tri = np.full(n, -1, dtype=np.int64)
    best_pt = np.zeros((n, 3))
    stack = np.empty(128, dtype=np.int64)
    for i in range(n):
        p = points[i]
        top = 0
        stack[0] = 0
        while top >= 0:
            node = stack[top]
            top -= 1
            # lower bound: squared distance to node bbox
            d2 = 0.0
            for ax in range(3):
                lo = bbox_min[node, ax]
                hi = bbox_max[node, ax]
                v = p[ax]
                if v < lo:
                    d2 += (lo - v) * (lo - v)
                elif v > hi:
                    d2 += (v - hi) * (v - hi)
            if d2 >= best_d2[i]:
                continue
            if left[node] < 0:  # leaf
                for t in range(start[node], start[node] + count[node]):
                    tri = tri_order[t]
                    cx, cy, cz = _closest_point_on_triangle(
                        p, tri_verts[tri, 0], tri_verts[tri, 1], tri_verts[tri, 2])
                    dd = ((p[0] - cx) ** 2 + (p[1] - cy) ** 2 + (p[2] - cz) ** 2)
                    if dd < best_d2[i]:
                        best_d2[i] = dd
                        best_tri[i] = tri
                        best_pt[i, 0] = cx
                        best_pt[i, 1] = cy
                        best_pt[i, 2] = cz
            else:
                top += 1
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
    return best_d2, best_tri, best_pt


class TriangleBvh:
    """Median-split AABB tree over triangles with exact nearest-point queries."""

    def __init__(self, mesh: TriangleMesh):
        if mesh.is_empty():
            raise UndefinedMetricError("cannot build BVH over empty mesh")
        self.mesh = mesh
        tris = mesh.triangles
        self.tri_verts = mesh.vertices[tris]  # (M, 3, 3)
        centroids = self.tri_verts.mean(axis=1)
        m = len(tris)

        bbox_min, bbox_max, left, right, start, count = [], [], [], [], [], []
        order = np.arange(m)

        def build(lo, hi):
            node = len(bbox_min)
            sel = order[lo:hi]
            vmin = self.tri_verts[sel].reshape(-1, 3).min(axis=0)
            vmax = self.tri_verts[sel].reshape(-1, 3).max(axis=0)
            bbox_min.append(vmin)
            bbox_max.append(vmax)
            left.append(-1)
            right.append(-1)
            start.append(lo)
            count.append(hi - lo)
            if hi - lo > _LEAF_SIZE:
                axis = int(np.argmax(vmax - vmin))
                mid = (lo + hi) // 2
                part = np.argsort(centroids[sel, axis], kind="stable")
                order[lo:hi] = sel[part]
                left[node] = build(lo, mid)
                right[node] = build(mid, hi)
                count[node] = 0
            return node

        import sys
        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, 10000))
        build(0, m)
        sys.setrecursionlimit(limit)
        self.bbox_min = np.array(bbox_min)
        self.bbox_max = np.array(bbox_max)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.tri_order = order

    def query(self, points: np.ndarray):
        """Returns (distances, triangle indices, closest points)."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        d2, tri, pt = _bvh_query(points, self.tri_verts, self.bbox_min,
                                 self.bbox_max, self.left, self.right,
                                 self.start, self.count, self.tri_order)
        return np.sqrt(d2), tri, pt

    def interpolated_normals(self, tri_idx: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Vertex normals of the mesh interpolated barycentrically at the
        given on-triangle points."""
        tris = self.mesh.triangles[tri_idx]
        a = self.mesh.vertices[tris[:, 0]]
        b = self.mesh.vertices[tris[:, 1]]
        c = self.mesh.vertices[tris[:, 2]]
        v0 = b - a
        v1 = c - a
        v2 = points - a
        d00 = np.einsum("ij,ij->i", v0, v0)
        d01 = np.einsum("ij,ij->i", v0, v1)
        d11 = np.einsum("ij,ij->i", v1, v1)
        d20 = np.einsum("ij,ij->i", v2, v0)
        d21 = np.einsum("ij,ij->i", v2, v1)
        denom = np.maximum(d00 * d11 - d01 * d01, 1e-30)
        v = np.clip((d11 * d20 - d01 * d21) / denom, 0.0, 1.0)
        w = np.clip((d00 * d21 - d01 * d20) / denom, 0.0, 1.0)
        u = np.clip(1.0 - v - w, 0.0, 1.0)
        n = (self.mesh.normals[tris[:, 0]] * u[:, None]
             + self.mesh.normals[tris[:, 1]] * v[:, None]
             + self.mesh.normals[tris[:, 2]] * w[:, None])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        return n / lens


def brute_force_nearest(mesh: TriangleMesh, points: np.ndarray):
    """Oracle: exact nearest distance by scanning every triangle (numpy)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tv = mesh.vertices[mesh.triangles]
    a, b, c = tv[:, 0], tv[:, 1], tv[:, 2]
    out = np.empty(len(points))
    out_tri = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        d2 = _vectorized_point_triangle_d2(p, a, b, c)
        out_tri[i] = np.argmin(d2)
        out[i] = np.sqrt(d2[out_tri[i]])
    return out, out_tri


def _vectorized_point_triangle_d2(p, a, b, c):
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    denom = np.maximum(va + vb + vc, 1e-300)
    v = vb / denom
    w = vc / denom

    closest = a + ab * v[:, None] + ac * w[:, None]
    # vertex regions
    closest = np.where((d1 <= 0)[:, None] & (d2 <= 0)[:, None], a, closest)
    closest = np.where((d3 >= 0)[:, None] & (d4 <= d3)[:, None], b, closest)
    closest = np.where((d6 >= 0)[:, None] & (d5 <= d6)[:, None], c, closest)
    # edge regions
    t_ab = np.clip(d1 / np.where(d1 - d3 == 0, 1e-300, d1 - d3), 0, 1)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[:, None], a + ab * t_ab[:, None], closest)
    t_ac = np.clip(d2 / np.where(d2 - d6 == 0, 1e-300, d2 - d6), 0, 1)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[:, None], a + ac * t_ac[:, None], closest)
    t_bc = np.clip((d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1e-300,
                                        (d4 - d3) + (d5 - d6)), 0, 1)
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(on_bc[:, None], b + (c - b) * t_bc[:, None], closest)
    return np.sum((closest - p) ** 2, axis=1)


def point_to_surface(source: TriangleMesh, target: TriangleMesh,
                     n_samples: int = N_SAMPLES_DEFAULT, seed: int = 0,
                     direction: str = "source_to_target") -> float:
    """Mean distance from area-uniform samples on source to the target surface."""
    if source.is_empty() or target.is_empty():
        raise UndefinedMetricError("point_to_surface needs non-empty meshes")
    if direction == "target_to_source":
        source, target = target, source
    pts, _ = sample_surface_points(source, n_samples, substream(seed, "metrics"))
    d, _, _ = TriangleBvh(target).query(pts)
    return float(d.mean())


def chamfer(a: TriangleMesh, b: TriangleMesh,
            n_samples: int = N_SAMPLES_DEFAULT, seed: int = 0) -> float:
    """Symmetric mean of the two point-to-surface directions."""
    return 0.5 * (point_to_surface(a, b, n_samples, seed)
                  + point_to_surface(b, a, n_samples, seed))


def normal_consistency(a: TriangleMesh, b: TriangleMesh,
                       n_samples: int = N_SAMPLES_DEFAULT, seed: int = 0) -> float:
    """Mean cosine between sample normals and the normals at their nearest
    points on the other mesh, averaged over both directions."""
    if a.is_empty() or b.is_empty():
        raise UndefinedMetricError("normal_consistency needs non-empty meshes")

    def one_way(src, dst):
        pts, normals = sample_surface_points(src, n_samples, substream(seed, "metrics"))
        bvh = TriangleBvh(dst)
        _, tri, closest = bvh.query(pts)
        dst_n = bvh.interpolated_normals(tri, closest)
        return float(np.einsum("ij,ij->i", normals, dst_n).mean())

    return 0.5 * (one_way(a, b) + one_way(b, a))


def evaluate_mesh(prediction: TriangleMesh, reference: TriangleMesh,
                  n_samples: int = N_SAMPLES_DEFAULT, seed: int = 0) -> MeshMetrics:
    return MeshMetrics(
        p2s=point_to_surface(prediction, reference, n_samples, seed),
        chamfer=chamfer(prediction, reference, n_samples, seed),
        normal_consistency=normal_consistency(prediction, reference, n_samples, seed))
