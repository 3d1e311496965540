"""Projective point-to-plane non-rigid registration.

Registers the frame-t surface to frame-t+1 multi-view depth maps by
optimizing per-node rigid transforms of the deformation graph with
Gauss-Newton; the normal equations are solved by preconditioned
conjugate gradients with a 6x6 block-Jacobi preconditioner.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from .camera import unproject_batch
from .frames import DepthFrame, sample_depth_bilinear
from .graph import DeformationGraph
from .mesh import TriangleMesh


class SolverDivergedError(RuntimeError):
    """Energy became non-finite during Gauss-Newton."""


@dataclass(frozen=True)
class TrackingEnergyParams:
    lambda_data: float = 1.0
    lambda_reg: float = 5.0
    max_gn_iters: int = 8
    pcg_tol: float = 1e-4
    pcg_max_iters: int = 200
    dist_reject: float = 0.03  # meters
    normal_reject: float = 0.5  # cos 60 deg
    lm_damping: float = 1e-4  # Marquardt diag scaling; bounds null-space drift
    converge_rel: float = 1e-5  # stop when relative energy decrease falls below

    def __post_init__(self):
        if self.lambda_data < 0 or self.lambda_reg < 0:
            raise ValueError("energy weights must be non-negative")
        if self.pcg_tol <= 0 or self.dist_reject <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class Correspondence:
    vertex_index: int
    v: np.ndarray  # reference vertex position
    p: np.ndarray  # matched point on live depth
    pn: np.ndarray  # unit normal of p
    view_index: int


@dataclass
class CorrespondenceSet:
    """Column arrays of accepted correspondences."""

    vertex_index: np.ndarray  # (N,)
    v: np.ndarray  # (N, 3)
    p: np.ndarray  # (N, 3)
    pn: np.ndarray  # (N, 3)
    view_index: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.vertex_index)

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(int(self.vertex_index[i]), self.v[i], self.p[i],
                              self.pn[i], int(self.view_index[i]))

    @staticmethod
    def empty() -> "CorrespondenceSet":
        z = np.zeros(0, dtype=np.int64)
        return CorrespondenceSet(z, np.zeros((0, 3)), np.zeros((0, 3)),
                                 np.zeros((0, 3)), z.copy())

    @staticmethod
    def concatenate(parts: list["CorrespondenceSet"]) -> "CorrespondenceSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return CorrespondenceSet.empty()
        return CorrespondenceSet(
            np.concatenate([p.vertex_index for p in parts]),
            np.concatenate([p.v for p in parts]),
            np.concatenate([p.p for p in parts]),
            np.concatenate([p.pn for p in parts]),
            np.concatenate([p.view_index for p in parts]))


def depth_normal_map(frame: DepthFrame) -> np.ndarray:
    """Per-pixel surface normals from central differences of unprojected
    depth, unit length, oriented toward the camera. NaN where invalid."""
    h, w = frame.values.shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    pts = unproject_batch(pix, np.maximum(frame.values.reshape(-1), 1e-9),
                          frame.intrinsics, frame.pose).reshape(h, w, 3)
    valid = frame.values > 0

    dx = np.full((h, w, 3), np.nan)
    dy = np.full((h, w, 3), np.nan)
    okx = valid[:, 2:] & valid[:, :-2]
    oky = valid[2:, :] & valid[:-2, :]
    dx[:, 1:-1][okx] = (pts[:, 2:] - pts[:, :-2])[okx]
    dy[1:-1, :][oky] = (pts[2:, :] - pts[:-2, :])[oky]

    n = np.cross(dx.reshape(-1, 3), dy.reshape(-1, 3)).reshape(h, w, 3)
    lens = np.linalg.norm(n, axis=2)
    ok = valid & np.isfinite(lens) & (lens > 1e-12)
    n[~ok] = np.nan
    n[ok] /= lens[ok][:, None]

    # orient toward the camera
    to_surface = pts - frame.pose.center
    flip = np.einsum("hwc,hwc->hw", n, to_surface) > 0
    n[flip & ok] *= -1
    return n


def find_correspondences(mesh: TriangleMesh, graph: DeformationGraph,
                         frames: list[DepthFrame], params: TrackingEnergyParams,
                         normal_maps: list[np.ndarray] | None = None) -> CorrespondenceSet:
    """Projective point-to-plane data association, one candidate per
    (vertex, view); rejects on distance, normal agreement, holes, and
    out-of-image projections."""
    warped, covered = graph.warp_points(mesh.vertices)
    warped_n = graph.warp_normals(mesh.vertices, mesh.normals)
    if normal_maps is None:
        normal_maps = [depth_normal_map(f) for f in frames]

    parts = []
    for view_index, (frame, nmap) in enumerate(zip(frames, normal_maps)):
        intr = frame.intrinsics
        cam = frame.pose.world_to_camera(warped)
        z = cam[:, 2]
        front = covered & (z > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            px = intr.fx * cam[:, 0] / z + intr.cx
            py = intr.fy * cam[:, 1] / z + intr.cy
        pix = np.stack([px, py], axis=1)
        pix[~front] = -1.0

        depths, valid_depth = sample_depth_bilinear(frame, pix)
        cand = front & valid_depth
        if not cand.any():
            continue
        p = unproject_batch(pix[cand], depths[cand], intr, frame.pose)

        ix = np.clip(np.round(px[cand]).astype(np.int64), 0, intr.width - 1)
        iy = np.clip(np.round(py[cand]).astype(np.int64), 0, intr.height - 1)
        pn = nmap[iy, ix]
        ok = np.isfinite(pn).all(axis=1)
        ok &= np.linalg.norm(warped[cand] - p, axis=1) <= params.dist_reject
        ok &= np.einsum("ij,ij->i", warped_n[cand], pn) >= params.normal_reject

        vidx = np.flatnonzero(cand)[ok]
        if len(vidx):
            parts.append(CorrespondenceSet(
                vidx, mesh.vertices[vidx], p[ok], pn[ok],
                np.full(len(vidx), view_index, dtype=np.int64)))
    return CorrespondenceSet.concatenate(parts)


def point_to_plane_residuals(graph: DeformationGraph, corrs: CorrespondenceSet) -> np.ndarray:
    """r_i = pn_i . (warp(v_i) - p_i) per correspondence."""
    if len(corrs) == 0:
        return np.zeros(0)
    warped, _ = graph.warp_points(corrs.v)
    return np.einsum("ij,ij->i", corrs.pn, warped - corrs.p)


def _reg_residuals(graph: DeformationGraph):
    """ARAP residuals over directed edges: T_j(g_k) - T_k(g_k).

    Returns (res (E,3), j_idx (E,), k_idx (E,))."""
    j_list, k_list = [], []
    for j, nbrs in enumerate(graph.edges):
        for k in nbrs:
            j_list.append(j)
            k_list.append(int(k))
    if not j_list:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    j_idx = np.array(j_list, dtype=np.int64)
    k_idx = np.array(k_list, dtype=np.int64)
    g_j = graph.positions[j_idx]
    g_k = graph.positions[k_idx]
    pred_j = np.einsum("eab,eb->ea", graph.rotations[j_idx], g_k - g_j) \
        + g_j + graph.translations[j_idx]
    pred_k = g_k + graph.translations[k_idx]
    return pred_j - pred_k, j_idx, k_idx


def energy(graph: DeformationGraph, corrs: CorrespondenceSet,
           params: TrackingEnergyParams):
    """Tracking energy. Returns (E_total, E_data, E_reg)."""
    r = point_to_plane_residuals(graph, corrs)
    e_data = float(np.sum(r**2))
    reg, _, _ = _reg_residuals(graph)
    e_reg = float(np.sum(reg**2))
    return params.lambda_data * e_data + params.lambda_reg * e_reg, e_data, e_reg


def _cross_matrix_rows(y):
    """Rows of -[y]x for a batch: returns (N, 3, 3) with M @ dtheta = dtheta x y."""
    n = len(y)
    m = np.zeros((n, 3, 3))
    m[:, 0, 1] = y[:, 2]
    m[:, 0, 2] = -y[:, 1]
    m[:, 1, 0] = -y[:, 2]
    m[:, 1, 2] = y[:, 0]
    m[:, 2, 0] = y[:, 1]
    m[:, 2, 1] = -y[:, 0]
    return m


def build_normal_equations(graph: DeformationGraph, corrs: CorrespondenceSet,
                           params: TrackingEnergyParams):
    """Gauss-Newton system A dx = b for the 6-per-node increment
    [dtheta, dt], linearized about the current transforms."""
    n = graph.n_nodes
    dof = 6 * n

    rows_a = []  # (data) sparse triplets
    cols_a = []
    vals_a = []
    r_data = np.zeros(0)
    if len(corrs):
        idx, w = graph.knn(corrs.v)
        wsum = np.maximum(w.sum(axis=1), 1e-12)
        wn = w / wsum[:, None]
        rel = corrs.v[:, None, :] - graph.positions[idx]
        y = np.einsum("nkab,nkb->nka", graph.rotations[idx], rel)  # R_j (v - g_j)
        # d r / d dtheta_j = w_j * (y_j x pn); d r / d dt_j = w_j * pn
        jac_theta = wn[:, :, None] * np.cross(y, corrs.pn[:, None, :])
        jac_t = wn[:, :, None] * corrs.pn[:, None, :]
        n_c = len(corrs)
        row = np.repeat(np.arange(n_c), 4 * 6)
        col_theta = (6 * idx[:, :, None] + np.arange(3)).reshape(n_c, -1)
        col_t = (6 * idx[:, :, None] + 3 + np.arange(3)).reshape(n_c, -1)
        cols = np.concatenate([col_theta, col_t], axis=1).reshape(-1)
        vals = np.concatenate([jac_theta.reshape(n_c, -1),
                               jac_t.reshape(n_c, -1)], axis=1).reshape(-1)
        rows_a.append(row)
        cols_a.append(cols)
        vals_a.append(vals)
        r_data = point_to_plane_residuals(graph, corrs)
    j_data = sparse.csr_matrix(
        (np.concatenate(vals_a) if vals_a else np.zeros(0),
         (np.concatenate(rows_a) if rows_a else np.zeros(0, dtype=np.int64),
          np.concatenate(cols_a) if cols_a else np.zeros(0, dtype=np.int64))),
        shape=(len(corrs), dof))

    reg, j_idx, k_idx = _reg_residuals(graph)
    n_e = len(j_idx)
    if n_e:
        g_rel = graph.positions[k_idx] - graph.positions[j_idx]
        y = np.einsum("eab,eb->ea", graph.rotations[j_idx], g_rel)
        blocks_theta = _cross_matrix_rows(y)  # d r / d dtheta_j = -[y]x
        eye = np.broadcast_to(np.eye(3), (n_e, 3, 3))
        row_base = 3 * np.arange(n_e)
        rows = []
        cols = []
        vals = []
        for block, node_idx, col_off in ((blocks_theta, j_idx, 0), (eye, j_idx, 3),
                                         (-eye, k_idx, 3)):
            r = (row_base[:, None, None] + np.arange(3)[:, None]).repeat(3, axis=2)
            c = (6 * node_idx[:, None, None] + col_off + np.arange(3)[None, None, :]
                 ).repeat(3, axis=1)
            rows.append(r.reshape(-1))
            cols.append(c.reshape(-1))
            vals.append(block.reshape(-1))
        j_reg = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(3 * n_e, dof))
        r_reg = reg.reshape(-1)
    else:
        j_reg = sparse.csr_matrix((0, dof))
        r_reg = np.zeros(0)

    a = (params.lambda_data * (j_data.T @ j_data)
         + params.lambda_reg * (j_reg.T @ j_reg)).tocsr()
    b = -(params.lambda_data * (j_data.T @ r_data)
          + params.lambda_reg * (j_reg.T @ r_reg))
    # Marquardt damping: conditions the system and pins the null space
    # (global symmetries of the scene otherwise let the solve wander);
    # the absolute floor keeps isolated-node blocks invertible.
    diag = a.diagonal()
    floor = 1e-9 * max(diag.max(), 1.0)
    a = a + sparse.diags(params.lm_damping * diag + floor)
    return a, b


def block_jacobi_preconditioner(a: sparse.csr_matrix, block: int = 6):
    """Inverse of the 6x6 diagonal blocks as a dense (nblocks, 6, 6) array."""
    dof = a.shape[0]
    nblocks = dof // block
    dense_blocks = np.zeros((nblocks, block, block))
    coo = a.tocoo()
    same = (coo.row // block) == (coo.col // block)
    br = coo.row[same]
    dense_blocks[br // block, br % block, coo.col[same] % block] += coo.data[same]
    return np.linalg.inv(dense_blocks)


def pcg_solve(a: sparse.csr_matrix, b: np.ndarray, tol: float, max_iters: int,
              block: int = 6):
    """Preconditioned conjugate gradients with block-Jacobi preconditioner.

    Returns (x, iterations, relative_residual)."""
    m_inv = block_jacobi_preconditioner(a, block)

    def apply_m(r):
        return np.einsum("nab,nb->na", m_inv, r.reshape(-1, block)).reshape(-1)

    x = np.zeros_like(b)
    r = b - a @ x
    norm_b = np.linalg.norm(b)
    if norm_b == 0:
        return x, 0, 0.0
    z = apply_m(r)
    p = z.copy()
    rz = r @ z
    it = 0
    for it in range(1, max_iters + 1):
        ap = a @ p
        alpha = rz / (p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        if np.linalg.norm(r) / norm_b < tol:
            break
        z = apply_m(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it, float(np.linalg.norm(b - a @ x) / norm_b)


def apply_increment(graph: DeformationGraph, dx: np.ndarray,
                    scale: float = 1.0) -> DeformationGraph:
    """Compose axis-angle increments onto node transforms."""
    n = graph.n_nodes
    inc = dx.reshape(n, 6) * scale
    delta_r = Rotation.from_rotvec(inc[:, :3]).as_matrix()
    rotations = np.einsum("nab,nbc->nac", delta_r, graph.rotations)
    # polar re-orthonormalization against drift
    u, _, vt = np.linalg.svd(rotations)
    det = np.linalg.det(u @ vt)
    u[det < 0, :, -1] *= -1
    rotations = u @ vt
    return graph.with_transforms(rotations, graph.translations + inc[:, 3:])


@dataclass
class TrackingResult:
    graph: DeformationGraph
    correspondences: CorrespondenceSet
    diagnostics: list[dict] = field(default_factory=list)


def solve_gauss_newton(graph: DeformationGraph, frames: list[DepthFrame],
                       mesh: TriangleMesh, params: TrackingEnergyParams,
                       verbose_stream=None) -> TrackingResult:
    """Gauss-Newton with per-iteration projective data association.

    Accepted steps never increase the energy measured on the iteration's
    own correspondence set (step halving, up to 4 halvings; the iteration
    is skipped if none helps).
    """
    normal_maps = [depth_normal_map(f) for f in frames]
    diagnostics: list[dict] = []

    for it in range(params.max_gn_iters):
        corrs = find_correspondences(mesh, graph, frames, params, normal_maps)
        if len(corrs) == 0:
            break
        e0, e_data0, e_reg0 = energy(graph, corrs, params)
        if not np.isfinite(e0):
            raise SolverDivergedError(f"non-finite energy at iteration {it}")
        a, b = build_normal_equations(graph, corrs, params)
        dx, pcg_iters, pcg_res = pcg_solve(a, b, params.pcg_tol, params.pcg_max_iters)

        accepted = False
        scale = 1.0
        for _ in range(5):  # full step + up to 4 halvings
            candidate = apply_increment(graph, dx, scale)
            e1, e_data1, e_reg1 = energy(candidate, corrs, params)
            if np.isfinite(e1) and e1 <= e0:
                graph = candidate
                accepted = True
                break
            scale *= 0.5
        record = {
            "iteration": it, "n_correspondences": len(corrs),
            "e_total": e0, "e_data": e_data0, "e_reg": e_reg0,
            "pcg_iterations": pcg_iters, "pcg_residual": pcg_res,
            "step_scale": scale if accepted else 0.0, "accepted": accepted,
        }
        diagnostics.append(record)
        if verbose_stream is not None:
            verbose_stream.write(json.dumps(record) + "\n")
        if not accepted:
            break
        if e0 - e1 <= params.converge_rel * max(e0, 1e-30):
            break

    corrs = find_correspondences(mesh, graph, frames, params, normal_maps)
    return TrackingResult(graph, corrs, diagnostics)
