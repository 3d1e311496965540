"""Embedded deformation graph: sparse nodes with rigid transforms whose
blended effect defines a dense warp field, plus the per-frame
topology-aware re-initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .mesh import TriangleMesh
from .tsdf import TsdfVolume

KNN_K = 4
EDGE_K_DEFAULT = 8
WEIGHT_CUTOFF = 1e-12
DEFAULT_NODE_RADIUS = 0.05


class UncoveredPointError(ValueError):
    """A warped point has no node within the influence cutoff."""


@dataclass(frozen=True)
class GraphNode:
    position: np.ndarray  # (3,) g_j in the frame the graph was built in
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    influence_radius: float

    def __post_init__(self):
        if self.influence_radius <= 0:
            raise ValueError("influence radius must be positive")
        rot = np.asarray(self.rotation, dtype=np.float64)
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(rot) - 1) > 1e-6:
            raise ValueError("node rotation not orthonormal")


@njit(cache=True)
def _farthest_first_sample(vertices, radius):
    n = len(vertices)
    min_d2 = np.full(n, np.inf)
    accepted = np.empty((n, 3), dtype=np.float64)
    accepted[0] = vertices[0]
    count = 1
    r2 = radius * radius
    while True:
        newest = accepted[count - 1]
        far_idx = 0
        far_d2 = -1.0
        for i in range(n):
            dx = vertices[i, 0] - newest[0]
            dy = vertices[i, 1] - newest[1]
            dz = vertices[i, 2] - newest[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < min_d2[i]:
                min_d2[i] = d2
            if min_d2[i] > far_d2:
                far_d2 = min_d2[i]
                far_idx = i
        if far_d2 <= r2:
            break
        accepted[count] = vertices[far_idx]
        count += 1
    return accepted[:count]


def sample_nodes(vertices: np.ndarray, radius: float) -> np.ndarray:
    """Farthest-first node positions: repeatedly accept the vertex
    farthest from the accepted set until every vertex lies within
    `radius` of some node (near-optimal covering)."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        raise ValueError("cannot sample nodes from empty vertex set")
    return _farthest_first_sample(vertices, float(radius))


def blend_weight(v, position, influence_radius: float):
    """Gaussian node influence exp(-|v - g|^2 / (2 d^2)); broadcasts."""
    v = np.asarray(v, dtype=np.float64)
    d2 = np.sum((v - np.asarray(position)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * influence_radius**2))


class DeformationGraph:
    """Node positions/transforms, neighbor edges, and a voxel KNN field."""

    def __init__(self, positions: np.ndarray, radius: float | np.ndarray,
                 rotations: np.ndarray | None = None,
                 translations: np.ndarray | None = None,
                 edge_k: int = EDGE_K_DEFAULT):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.radii = np.full(n, radius, dtype=np.float64) if np.isscalar(radius) \
            else np.asarray(radius, dtype=np.float64).reshape(n)
        self.rotations = np.tile(np.eye(3), (n, 1, 1)) if rotations is None \
            else np.asarray(rotations, dtype=np.float64).reshape(n, 3, 3)
        self.translations = np.zeros((n, 3)) if translations is None \
            else np.asarray(translations, dtype=np.float64).reshape(n, 3)
        self.edge_k = edge_k
        self._tree = cKDTree(self.positions) if n else None
        self.edges = self._build_edges()
        self._knn_field: LazyKnnField | None = None
        self._is_identity: bool | None = None

    def is_identity(self) -> bool:
        """True when every node transform is exactly the identity."""
        if self._is_identity is None:
            self._is_identity = bool(
                (self.translations == 0.0).all()
                and (self.rotations == np.eye(3)).all())
        return self._is_identity

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def node(self, j: int) -> GraphNode:
        return GraphNode(self.positions[j], self.rotations[j],
                         self.translations[j], float(self.radii[j]))

    def _build_edges(self) -> list[np.ndarray]:
        n = self.n_nodes
        if n <= 1:
            return [np.zeros(0, dtype=np.int64) for _ in range(n)]
        k = min(self.edge_k + 1, n)
        _, idx = self._tree.query(self.positions, k=k)
        neighbor_sets = [set() for _ in range(n)]
        for j in range(n):
            for m in idx[j]:
                if m != j:
                    neighbor_sets[j].add(int(m))
        # symmetrize
        for j in range(n):
            for m in neighbor_sets[j]:
                neighbor_sets[m].add(j)
        return [np.array(sorted(s), dtype=np.int64) for s in neighbor_sets]

    def with_transforms(self, rotations: np.ndarray, translations: np.ndarray) -> "DeformationGraph":
        g = DeformationGraph(self.positions, self.radii, rotations, translations, self.edge_k)
        return g

    def live_positions(self) -> np.ndarray:
        """Node positions after applying their own transforms (g + t)."""
        return self.positions + self.translations

    def knn(self, points: np.ndarray, k: int = KNN_K):
        """(indices (N,k), weights (N,k)) of the k nearest *distinct*
        nodes, Gaussian weights, unnormalized. Coincident duplicate nodes
        count once (so duplicating a node never changes a blend); missing
        slots carry zero weight."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.n_nodes == 0:
            raise ValueError("graph has no nodes")
        kq = min(2 * k, self.n_nodes)
        dist, idx = self._tree.query(points, k=kq)
        if kq == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        # mark candidates that duplicate an earlier (nearer) candidate
        pos = self.positions[idx]  # (N, kq, 3)
        same = (np.abs(pos[:, :, None, :] - pos[:, None, :, :]) < 1e-12).all(-1)
        earlier = np.tril(np.ones((kq, kq), dtype=bool), -1)
        dup = (same & earlier).any(-1)  # (N, kq)
        rank = np.where(dup, kq + np.arange(kq), np.arange(kq))
        order = np.argsort(rank, axis=1, kind="stable")[:, :k]
        rows = np.arange(len(points))[:, None]
        idx_k = idx[rows, order[:, :min(k, kq)]]
        dist_k = dist[rows, order[:, :min(k, kq)]]
        dup_k = dup[rows, order[:, :min(k, kq)]]
        if kq < k:
            pad = k - kq
            idx_k = np.concatenate([idx_k, np.repeat(idx_k[:, -1:], pad, axis=1)], axis=1)
            dist_k = np.concatenate([dist_k, np.full((len(points), pad), np.inf)], axis=1)
            dup_k = np.concatenate([dup_k, np.ones((len(points), pad), dtype=bool)], axis=1)
        d = self.radii[idx_k]
        with np.errstate(over="ignore"):
            w = np.exp(-(dist_k**2) / (2.0 * d**2))
        w[dup_k] = 0.0
        w[~np.isfinite(dist_k)] = 0.0
        return idx_k, w

    def warp_points(self, points: np.ndarray, strict: bool = False):
        """Blend per-node rigid maps over each point's KNN.

        Returns (warped (N,3), covered (N,)); uncovered points (all
        weights below cutoff) pass through unchanged unless `strict`,
        which raises UncoveredPointError.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx, w = self.knn(points)
        wsum = w.sum(axis=1)
        covered = wsum >= WEIGHT_CUTOFF
        if strict and not covered.all():
            raise UncoveredPointError(f"{(~covered).sum()} points beyond node influence")
        if self.is_identity():  # exact, avoids blend roundoff
            return points.copy(), covered
        wn = np.where(covered[:, None], w / np.maximum(wsum, WEIGHT_CUTOFF)[:, None], 0.0)

        rel = points[:, None, :] - self.positions[idx]  # (N, K, 3)
        rotated = np.einsum("nkab,nkb->nka", self.rotations[idx], rel)
        targets = rotated + self.positions[idx] + self.translations[idx]
        warped = np.einsum("nk,nka->na", wn, targets)
        warped[~covered] = points[~covered]
        return warped, covered

    def inverse_warp_points(self, points: np.ndarray):
        """Approximate inverse of warp_points: per-node rigid inverses,
        KNN and Gaussian weights anchored at the *live* node positions.
        Exact for identity and consensus-rigid warps.

        Returns (reference positions (N,3), covered (N,))."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        max_reach = 3.0 * self.radii.max()  # beyond this the inverse is extrapolation
        if self.is_identity():
            d, _ = cKDTree(self.positions).query(points, k=1)
            return points.copy(), d <= max_reach
        live = self.live_positions()
        tree = cKDTree(live)
        kq = min(KNN_K, self.n_nodes)
        dist, idx = tree.query(points, k=kq)
        if kq == 1:
            dist = dist[:, None]
            idx = idx[:, None]
        d = self.radii[idx]
        with np.errstate(over="ignore"):
            w = np.exp(-(dist**2) / (2.0 * d**2))
        wsum = w.sum(axis=1)
        covered = (wsum >= WEIGHT_CUTOFF) & (dist.min(axis=1) <= max_reach)
        wn = np.where(covered[:, None], w / np.maximum(wsum, WEIGHT_CUTOFF)[:, None], 0.0)
        rel = points[:, None, :] - live[idx]
        unrotated = np.einsum("nkba,nkb->nka", self.rotations[idx], rel)  # R^T
        targets = unrotated + self.positions[idx]
        out = np.einsum("nk,nka->na", wn, targets)
        out[~covered] = points[~covered]
        return out, covered

    def blended_rotations(self, points: np.ndarray) -> np.ndarray:
        """Per-point blended node rotation, polar-projected back to SO(3)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        idx, w = self.knn(points)
        wsum = np.maximum(w.sum(axis=1), WEIGHT_CUTOFF)
        wn = w / wsum[:, None]
        blend = np.einsum("nk,nkab->nab", wn, self.rotations[idx])
        u, _, vt = np.linalg.svd(blend)
        det = np.linalg.det(u @ vt)
        u[det < 0, :, -1] *= -1
        return u @ vt

    def warp_normals(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        rots = self.blended_rotations(points)
        out = np.einsum("nab,nb->na", rots, np.asarray(normals, dtype=np.float64))
        lens = np.linalg.norm(out, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        return out / lens

    def knn_field(self, volume: TsdfVolume) -> "LazyKnnField":
        if self._knn_field is None or self._knn_field.volume is not volume:
            self._knn_field = LazyKnnField(self, volume)
        return self._knn_field

    def save_json(self, path) -> None:
        doc = {
            "positions": self.positions.tolist(),
            "radii": self.radii.tolist(),
            "rotations": [r.reshape(-1).tolist() for r in self.rotations],
            "translations": self.translations.tolist(),
            "edges": [e.tolist() for e in self.edges],
        }
        Path(path).write_text(json.dumps(doc) + "\n")


class LazyKnnField:
    """Per-voxel K nearest nodes + blend weights, filled per 8^3 block on
    first touch. Results are identical to eager computation."""

    BLOCK = 8

    def __init__(self, graph: DeformationGraph, volume: TsdfVolume):
        self.graph = graph
        self.volume = volume
        nx, ny, nz = volume.dims
        self.indices = np.full((nx, ny, nz, KNN_K), -1, dtype=np.int64)
        self.weights = np.zeros((nx, ny, nz, KNN_K))
        b = self.BLOCK
        self._block_done = np.zeros(((nx + b - 1) // b, (ny + b - 1) // b,
                                     (nz + b - 1) // b), dtype=bool)

    def _fill_block(self, bx: int, by: int, bz: int) -> None:
        b = self.BLOCK
        nx, ny, nz = self.volume.dims
        xs = np.arange(bx * b, min((bx + 1) * b, nx))
        ys = np.arange(by * b, min((by + 1) * b, ny))
        zs = np.arange(bz * b, min((bz + 1) * b, nz))
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        idx3 = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        centers = self.volume.origin + idx3 * self.volume.voxel_size
        idx, w = self.graph.knn(centers)
        shape = (len(xs), len(ys), len(zs))
        self.indices[bx * b:bx * b + shape[0], by * b:by * b + shape[1],
                     bz * b:bz * b + shape[2]] = idx.reshape(*shape, KNN_K)
        self.weights[bx * b:bx * b + shape[0], by * b:by * b + shape[1],
                     bz * b:bz * b + shape[2]] = w.reshape(*shape, KNN_K)
        self._block_done[bx, by, bz] = True

    def query_voxels(self, voxel_indices: np.ndarray):
        """(node_indices (N,K), weights (N,K)) for integer voxel indices."""
        voxel_indices = np.asarray(voxel_indices, dtype=np.int64).reshape(-1, 3)
        blocks = voxel_indices // self.BLOCK
        for bx, by, bz in np.unique(blocks, axis=0):
            if not self._block_done[bx, by, bz]:
                self._fill_block(bx, by, bz)
        i, j, k = voxel_indices.T
        return self.indices[i, j, k], self.weights[i, j, k]

    def fill_all(self) -> None:
        for bx in range(self._block_done.shape[0]):
            for by in range(self._block_done.shape[1]):
                for bz in range(self._block_done.shape[2]):
                    if not self._block_done[bx, by, bz]:
                        self._fill_block(bx, by, bz)


def coverage_distances(vertices: np.ndarray, node_positions: np.ndarray) -> np.ndarray:
    """Distance from each vertex to its nearest node."""
    tree = cKDTree(np.asarray(node_positions).reshape(-1, 3))
    dist, _ = tree.query(np.asarray(vertices).reshape(-1, 3), k=1)
    return dist


def initialize_topology_aware(prev_graph_live: DeformationGraph | None,
                              current_volume: TsdfVolume,
                              current_surface: TriangleMesh,
                              delta_t: float = 0.5,
                              sampling_radius: float = DEFAULT_NODE_RADIUS,
                              edge_k: int = EDGE_K_DEFAULT) -> DeformationGraph:
    """Per-frame node graph init: carry over live nodes that still sit
    near the current observations (|tsdf| <= delta_t), delete the rest,
    then sample additional nodes over uncovered surface vertices.
    """
    if current_surface.is_empty():
        return DeformationGraph(np.zeros((0, 3)), sampling_radius, edge_k=edge_k)

    kept_positions = np.zeros((0, 3))
    if prev_graph_live is not None and prev_graph_live.n_nodes:
        live = prev_graph_live.live_positions()
        tsdf, _, observed = current_volume.query_tsdf(live)
        keep = observed & (np.abs(tsdf) <= delta_t)
        kept_positions = live[keep]

    verts = current_surface.vertices
    if len(kept_positions):
        uncovered = coverage_distances(verts, kept_positions) > sampling_radius
    else:
        uncovered = np.ones(len(verts), dtype=bool)
    if uncovered.any():
        new_positions = sample_nodes(verts[uncovered], sampling_radius)
        positions = np.concatenate([kept_positions, new_positions], axis=0)
    else:
        positions = kept_positions
    return DeformationGraph(positions, sampling_radius, edge_k=edge_k)
