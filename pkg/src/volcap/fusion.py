"""Sliding-window fusion: the 3-frame window (t-1, t, t+1) with
observation-consistent, tracking-error-gated TSDF updates.

A voxel of frame t's volume accepts a next-frame observation only when
(i) its interpolated tracking error stays below delta_e and (ii) a valid
truncated-band voxel of the frame-t observation volume lies within the
Chebyshev search radius. The preceding frame's contribution arrives as a
"carry" volume built the same way at the end of the previous step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .frames import DepthFrame
from .graph import KNN_K, DeformationGraph, initialize_topology_aware
from .mesh import TriangleMesh
from .tracking import (CorrespondenceSet, TrackingEnergyParams,
                       point_to_plane_residuals, solve_gauss_newton)
from .tsdf import TsdfVolume

EPS_DEFAULT = 1e-6


@dataclass(frozen=True)
class FusionGateParams:
    delta_e: float = 0.1  # squared-meters tracking-error threshold
    neighbor_radius: int = 3  # Chebyshev voxels
    eps: float = EPS_DEFAULT
    normalized_voxel_error: bool = False  # weights of the error interpolation

    def __post_init__(self):
        if self.delta_e <= 0:
            raise ValueError("delta_e must be positive")
        if self.neighbor_radius < 1:
            raise ValueError("neighbor_radius must be >= 1")


def node_tracking_error(corrs: CorrespondenceSet, graph: DeformationGraph,
                        eps: float = EPS_DEFAULT) -> np.ndarray:
    """Per-node error: sum of squared point-to-plane residuals of the
    correspondences the node controls, over the summed blend weights."""
    num = np.zeros(graph.n_nodes)
    den = np.zeros(graph.n_nodes)
    if len(corrs):
        r2 = point_to_plane_residuals(graph, corrs) ** 2
        idx, w = graph.knn(corrs.v, k=KNN_K)
        controlled = w > 0  # zero-weight slots are padding, not control
        for k in range(idx.shape[1]):
            sel = controlled[:, k]
            np.add.at(num, idx[sel, k], r2[sel])
            np.add.at(den, idx[sel, k], w[sel, k])
    return num / (den + eps)


def voxel_tracking_error(points: np.ndarray, graph: DeformationGraph,
                         node_errors: np.ndarray,
                         normalized: bool = False) -> np.ndarray:
    """Interpolated tracking error at arbitrary points: sum over the K=4
    nearest nodes of w(x, n_j) * e(n_j), weights unnormalized unless
    `normalized`."""
    idx, w = graph.knn(np.asarray(points, dtype=np.float64).reshape(-1, 3), k=KNN_K)
    errs = np.sum(w * node_errors[idx], axis=1)
    if normalized:
        errs = errs / np.maximum(w.sum(axis=1), 1e-12)
    return errs


def _band_neighborhood(obs_volume: TsdfVolume, radius: int) -> np.ndarray:
    """Voxels with a valid truncated-band voxel within Chebyshev radius."""
    band = obs_volume.observed_band_mask()
    size = 2 * radius + 1
    return ndimage.maximum_filter(band.astype(np.uint8), size=size) > 0


def fusion_gate_mask(volume: TsdfVolume, obs_volume: TsdfVolume,
                     graph: DeformationGraph, node_errors: np.ndarray,
                     params: FusionGateParams,
                     positions: np.ndarray | None = None) -> np.ndarray:
    """Flat mask of voxels passing conditions (i) and (ii).

    `positions` supplies the per-voxel sample points used for the
    tracking-error interpolation and the band lookup (defaults to the
    voxel centers; the carry pass uses inverse-warped centers)."""
    near_band = _band_neighborhood(obs_volume, params.neighbor_radius)
    if positions is None:
        cond_ii = near_band.reshape(-1)
        positions = volume.voxel_centers()
    else:
        # look up the band neighborhood at the supplied positions
        g = np.round((positions - obs_volume.origin) / obs_volume.voxel_size).astype(np.int64)
        inside = ((g >= 0) & (g < np.array(obs_volume.dims))).all(axis=1)
        gc = np.clip(g, 0, np.array(obs_volume.dims) - 1)
        cond_ii = inside & near_band[gc[:, 0], gc[:, 1], gc[:, 2]]

    mask = cond_ii.copy()
    if mask.any() and graph.n_nodes:
        errs = voxel_tracking_error(positions[mask], graph, node_errors,
                                    params.normalized_voxel_error)
        cond_i = errs < params.delta_e
        mask[np.flatnonzero(mask)[~cond_i]] = False
    elif graph.n_nodes == 0:
        mask[:] = False
    return mask


def fuse_observation_consistent(volume: TsdfVolume, obs_volume: TsdfVolume,
                                graph: DeformationGraph, node_errors: np.ndarray,
                                frames_next: list[DepthFrame],
                                params: FusionGateParams,
                                return_written: bool = False):
    """Fuse next-frame observations into the current volume through the
    tracked warp, gated per voxel. Returns the volume (and the union
    write mask when `return_written`)."""
    gate = fusion_gate_mask(volume, obs_volume, graph, node_errors, params)
    written_any = np.zeros(gate.shape, dtype=bool)
    if gate.any():
        centers = volume.voxel_centers()
        warped = centers.copy()
        warped[gate], _ = graph.warp_points(centers[gate])
        for frame in frames_next:
            _, written = volume.integrate_depth(frame, positions=warped,
                                                update_mask=gate, return_written=True)
            written_any |= written
    if return_written:
        return volume, written_any
    return volume


@dataclass
class FusionConfig:
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    voxel_size: float = 0.01
    truncation: float = 0.0  # 0 -> 4 * voxel_size
    delta_t: float = 0.5
    node_radius: float = 0.05
    edge_k: int = 8
    gate: FusionGateParams = field(default_factory=FusionGateParams)
    tracking: TrackingEnergyParams = field(default_factory=TrackingEnergyParams)

    def new_volume(self) -> TsdfVolume:
        return TsdfVolume.from_bounds(self.bounds_lo, self.bounds_hi,
                                      self.voxel_size, self.truncation)


@dataclass
class SlidingWindowState:
    frame_index: int
    volume: TsdfVolume  # fused volume for frame t
    obs_volume: TsdfVolume  # frame t's own observations only
    mesh: TriangleMesh  # final fused mesh for frame t
    graph: DeformationGraph  # tracked to frame t+1
    node_errors: np.ndarray
    carry_next: TsdfVolume  # frame t's observations in frame t+1 coordinates
    correspondences: CorrespondenceSet = None
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.node_errors) != self.graph.n_nodes:
            raise ValueError("node_errors length must match node count")
        if len(self.node_errors) and (np.asarray(self.node_errors) < 0).any():
            raise ValueError("node errors must be non-negative")


def _build_carry(config: FusionConfig, obs_volume: TsdfVolume,
                 graph: DeformationGraph, node_errors: np.ndarray,
                 frames_t: list[DepthFrame]) -> TsdfVolume:
    """Frame t's observations gathered into frame t+1 voxel coordinates
    through the approximate inverse warp, same consistency gate."""
    carry = config.new_volume()
    if graph.n_nodes == 0:
        return carry

    # Candidate pre-filter: a voxel can only pass the band check if it
    # sits within (search radius + max inverse-warp displacement) of the
    # band. Covered points displace at most max|t| plus the rotation
    # sweep over the influence cutoff (7.44 d); uncovered pass through.
    rot_angle = np.linalg.norm(Rotation.from_matrix(graph.rotations).as_rotvec(), axis=1)
    disp_bound = (np.abs(graph.translations).max(initial=0.0)
                  + 2 * np.sin(rot_angle.max(initial=0.0) / 2) * 7.44 * graph.radii.max())
    extra = int(np.ceil(1.5 * disp_bound / config.voxel_size))
    near = _band_neighborhood(obs_volume, config.gate.neighbor_radius + extra).reshape(-1)
    if not near.any():
        return carry

    centers = carry.voxel_centers()
    ref_positions = centers.copy()
    ref_positions[near], _ = graph.inverse_warp_points(centers[near])
    gate = fusion_gate_mask(carry, obs_volume, graph, node_errors, config.gate,
                            positions=ref_positions)
    gate &= near
    if gate.any():
        for frame in frames_t:
            carry.integrate_depth(frame, positions=ref_positions, update_mask=gate)
    return carry


def step_window(prev: SlidingWindowState | None,
                frames_t: list[DepthFrame],
                frames_next: list[DepthFrame],
                config: FusionConfig,
                verbose_stream=None) -> SlidingWindowState:
    """One sliding-window step producing frame t's fused surface.

    Consumes only frames t and t+1 plus the carry stored in `prev`
    (1-frame output latency). With prev=None this is the bootstrap step:
    frame t fuses with t+1 only.
    """
    frame_index = frames_t[0].timestamp_index

    obs_volume = config.new_volume()
    for frame in frames_t:
        obs_volume.integrate_depth(frame)

    volume = prev.carry_next.copy() if prev is not None else config.new_volume()
    for frame in frames_t:
        volume.integrate_depth(frame)

    mesh_t = volume.extract_mesh()
    prev_graph = prev.graph if prev is not None else None
    graph = initialize_topology_aware(prev_graph, obs_volume, mesh_t,
                                      delta_t=config.delta_t,
                                      sampling_radius=config.node_radius,
                                      edge_k=config.edge_k)

    if graph.n_nodes and not mesh_t.is_empty():
        result = solve_gauss_newton(graph, frames_next, mesh_t, config.tracking,
                                    verbose_stream=verbose_stream)
        graph = result.graph
        corrs = result.correspondences
        diagnostics = result.diagnostics
    else:
        corrs = CorrespondenceSet.empty()
        diagnostics = []

    node_errors = node_tracking_error(corrs, graph, config.gate.eps)
    volume = fuse_observation_consistent(volume, obs_volume, graph, node_errors,
                                         frames_next, config.gate)
    final_mesh = volume.extract_mesh()
    carry = _build_carry(config, obs_volume, graph, node_errors, frames_t)
    return SlidingWindowState(frame_index, volume, obs_volume, final_mesh,
                              graph, node_errors, carry, corrs, diagnostics)


def run_sliding_fusion(frame_sequence: list[list[DepthFrame]],
                       config: FusionConfig, verbose_stream=None):
    """Run the window over a whole sequence. For N input frames, yields
    N-1 states (frame t's output needs frame t+1)."""
    prev = None
    for t in range(len(frame_sequence) - 1):
        prev = step_window(prev, frame_sequence[t], frame_sequence[t + 1],
                           config, verbose_stream=verbose_stream)
        yield prev
