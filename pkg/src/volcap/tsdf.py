"""Dense truncated-signed-distance volume.

Sign convention: positive = free space (camera side of the surface),
negative = behind the surface. tsdf values are normalized to [-1, 1];
weight 0 marks a never-observed voxel (tsdf initialized to +1 there).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .camera import CameraIntrinsics, CameraPose
from .frames import DepthFrame
from .mesh import TriangleMesh

W_MAX_DEFAULT = 64.0


@dataclass
class TsdfVolume:
    origin: np.ndarray  # (3,) world meters, center of voxel (0,0,0)
    voxel_size: float
    dims: tuple[int, int, int]
    truncation: float = 0.0  # defaults to 4 * voxel_size
    w_max: float = W_MAX_DEFAULT
    # pixels steeper than this incidence proxy (|grad d| * fx / z, ~tan
    # of the grazing angle) are ignored: flying-pixel suppression
    grazing_max_tan: float = 4.0
    tsdf: np.ndarray = field(default=None, repr=False)
    weight: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) < 2:
            raise ValueError("volume needs at least 2 voxels per axis")
        if self.truncation <= 0:
            self.truncation = 4.0 * self.voxel_size
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims, dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros(self.dims, dtype=np.float64)

    @staticmethod
    def from_bounds(lo, hi, voxel_size: float, truncation: float = 0.0,
                    w_max: float = W_MAX_DEFAULT,
                    grazing_max_tan: float = 4.0) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) + 1 for i in range(3))
        return TsdfVolume(lo, voxel_size, dims, truncation, w_max, grazing_max_tan)

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims,
                          self.truncation, self.w_max, self.grazing_max_tan,
                          tsdf=self.tsdf.copy(), weight=self.weight.copy())

    def empty_like(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.dims,
                          self.truncation, self.w_max, self.grazing_max_tan)

    def voxel_centers(self) -> np.ndarray:
        """(Nx*Ny*Nz, 3) world positions of all voxel centers, C order."""
        idx = np.stack(np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij"),
                       axis=-1).reshape(-1, 3)
        return self.origin + idx * self.voxel_size

    def _usable_pixels(self, frame: DepthFrame) -> np.ndarray:
        """Valid pixels excluding grazing-incidence ones (steep in-surface
        depth gradient, the flying-pixel regime). Differences are taken
        over valid neighbors only, so silhouette rims survive."""
        valid = frame.values > 0
        if not np.isfinite(self.grazing_max_tan):
            return valid

        def axis_gradient(axis):
            plus = np.roll(frame.values, -1, axis=axis)
            minus = np.roll(frame.values, 1, axis=axis)
            vplus = np.roll(valid, -1, axis=axis)
            vminus = np.roll(valid, 1, axis=axis)
            central = (plus - minus) / 2.0
            fwd = plus - frame.values
            bwd = frame.values - minus
            g = np.where(vplus & vminus, central,
                         np.where(vplus, fwd, np.where(vminus, bwd, 0.0)))
            edge = np.zeros_like(g, dtype=bool)
            idx = [slice(None)] * 2
            idx[axis] = 0
            edge[tuple(idx)] = True
            idx[axis] = -1
            edge[tuple(idx)] = True
            return np.where(edge, 0.0, g)

        grad = np.hypot(axis_gradient(0), axis_gradient(1))
        with np.errstate(divide="ignore", invalid="ignore"):
            steep = grad * frame.intrinsics.fx / np.maximum(frame.values, 1e-12)
        return valid & (steep <= self.grazing_max_tan)

    def integrate_depth(self, frame: DepthFrame, positions: np.ndarray | None = None,
                        update_mask: np.ndarray | None = None,
                        return_written: bool = False):
        """Projective TSDF update from one depth frame.

        `positions` overrides the per-voxel sample points (flat (N,3),
        used by warped fusion); `update_mask` (flat bool) restricts
        which voxels may be written. Returns self, or (self, written
        flat mask) when `return_written`.
        """
        if positions is None:
            positions = self.voxel_centers()
        cam = frame.pose.world_to_camera(positions)
        z = cam[:, 2]
        intr = frame.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            px = intr.fx * cam[:, 0] / z + intr.cx
            py = intr.fy * cam[:, 1] / z + intr.cy
        ix = np.round(px).astype(np.int64)
        iy = np.round(py).astype(np.int64)
        in_image = (z > 0) & (ix >= 0) & (ix < intr.width) & (iy >= 0) & (iy < intr.height)

        usable = self._usable_pixels(frame)
        depth = np.zeros(len(z))
        ok = in_image.copy()
        ok[in_image] = usable[iy[in_image], ix[in_image]]
        depth[ok] = frame.values[iy[ok], ix[ok]]
        sdf = depth - z
        valid = in_image & (depth > 0) & (sdf > -self.truncation)
        if update_mask is not None:
            valid &= update_mask

        tsdf_flat = self.tsdf.reshape(-1)
        w_flat = self.weight.reshape(-1)
        contrib = np.clip(sdf[valid] / self.truncation, -1.0, 1.0)
        w_old = w_flat[valid]
        tsdf_flat[valid] = (w_old * tsdf_flat[valid] + contrib) / (w_old + 1.0)
        w_flat[valid] = np.minimum(w_old + 1.0, self.w_max)
        if return_written:
            return self, valid
        return self

    def query_tsdf(self, points: np.ndarray):
        """Trilinear (tsdf, weight) lookup.

        Returns (tsdf (N,), weight (N,), observed (N,)); a query is
        unobserved when outside the volume or any of its 8 surrounding
        voxels has weight 0.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = (points - self.origin) / self.voxel_size
        i0 = np.floor(g).astype(np.int64)
        frac = g - i0
        nx, ny, nz = self.dims
        inside = ((i0[:, 0] >= 0) & (i0[:, 0] < nx - 1)
                  & (i0[:, 1] >= 0) & (i0[:, 1] < ny - 1)
                  & (i0[:, 2] >= 0) & (i0[:, 2] < nz - 1))
        i0c = np.clip(i0, 0, np.array(self.dims) - 2)

        tsdf_out = np.zeros(len(points))
        w_out = np.zeros(len(points))
        observed = inside.copy()
        acc_t = np.zeros(len(points))
        acc_w = np.zeros(len(points))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wx = frac[:, 0] if dx else 1 - frac[:, 0]
                    wy = frac[:, 1] if dy else 1 - frac[:, 1]
                    wz = frac[:, 2] if dz else 1 - frac[:, 2]
                    w = wx * wy * wz
                    t_c = self.tsdf[i0c[:, 0] + dx, i0c[:, 1] + dy, i0c[:, 2] + dz]
                    w_c = self.weight[i0c[:, 0] + dx, i0c[:, 1] + dy, i0c[:, 2] + dz]
                    observed &= w_c > 0
                    acc_t += w * t_c
                    acc_w += w * w_c
        tsdf_out[observed] = acc_t[observed]
        w_out[observed] = acc_w[observed]
        return tsdf_out, w_out, observed

    def observed_band_mask(self) -> np.ndarray:
        """Voxels in the truncated band of observations (weight > 0, |tsdf| < 1)."""
        return (self.weight > 0) & (np.abs(self.tsdf) < 1.0)

    def occupied_component_count(self, min_voxels: int = 2) -> int:
        """Connected components (6-connectivity) of the observed interior
        region (tsdf < 0), ignoring islands below `min_voxels` (single
        stale voxels are quantization noise, not geometry). Robust to
        surface cracks where sparse views leave the extracted mesh open."""
        from scipy import ndimage
        inside = (self.weight > 0) & (self.tsdf < 0)
        labels, count = ndimage.label(inside)
        if count == 0:
            return 0
        sizes = np.bincount(labels.reshape(-1))[1:]
        return int((sizes >= min_voxels).sum())

    def gradient_at(self, points: np.ndarray) -> np.ndarray:
        """Central-difference TSDF gradient, trilinearly sampled."""
        h = self.voxel_size
        grads = np.zeros((len(points), 3))
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            tp, _, _ = self.query_tsdf(points + offset)
            tm, _, _ = self.query_tsdf(points - offset)
            grads[:, axis] = (tp - tm) / (2 * h)
        return grads

    def extract_mesh(self) -> TriangleMesh:
        """Marching cubes at isolevel 0 over observed cells.

        Cells with any weight-0 corner are skipped. Vertex normals come
        from the central-difference TSDF gradient, oriented toward
        positive tsdf (outward, into free space).
        """
        observed = self.weight > 0
        if not self.observed_band_mask().any():
            return TriangleMesh.empty()
        if not ((self.tsdf[observed] < 0).any() and (self.tsdf[observed] > 0).any()):
            return TriangleMesh.empty()
        try:
            verts, faces, _, _ = measure.marching_cubes(
                self.tsdf, level=0.0, spacing=(self.voxel_size,) * 3,
                gradient_direction="ascent", allow_degenerate=False)
        except (ValueError, RuntimeError):
            return TriangleMesh.empty()
        if len(faces) == 0:
            return TriangleMesh.empty()

        # Drop triangles from cells with any unobserved corner. Each MC
        # triangle lies inside one grid cell; its centroid picks the cell.
        cell_ok = (observed[:-1, :-1, :-1] & observed[1:, :-1, :-1]
                   & observed[:-1, 1:, :-1] & observed[:-1, :-1, 1:]
                   & observed[1:, 1:, :-1] & observed[1:, :-1, 1:]
                   & observed[:-1, 1:, 1:] & observed[1:, 1:, 1:])
        centroids = verts[faces].mean(axis=1) / self.voxel_size
        cells = np.clip(np.floor(centroids).astype(np.int64), 0,
                        np.array(self.dims) - 2)
        keep = cell_ok[cells[:, 0], cells[:, 1], cells[:, 2]]
        faces = faces[keep]
        if len(faces) == 0:
            return TriangleMesh.empty()
        used = np.unique(faces.reshape(-1))
        remap = np.full(len(verts), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        verts = verts[used]
        faces = remap[faces]
        verts = verts + self.origin

        normals = self.gradient_at(verts)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        lens[lens < 1e-12] = 1.0
        normals = normals / lens

        # Consistent winding: triangle normal agrees with vertex normals.
        v0 = verts[faces[:, 0]]
        v1 = verts[faces[:, 1]]
        v2 = verts[faces[:, 2]]
        tri_n = np.cross(v1 - v0, v2 - v0)
        vert_n = normals[faces[:, 0]] + normals[faces[:, 1]] + normals[faces[:, 2]]
        flip = np.einsum("ij,ij->i", tri_n, vert_n) < 0
        faces = faces.copy()
        faces[flip] = faces[flip][:, [0, 2, 1]]
        return TriangleMesh(verts, faces.astype(np.int64), normals)

    def save(self, prefix) -> None:
        """Debug dump: raw little-endian float32 arrays + JSON sidecar."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        (prefix.parent / (prefix.name + ".tsdf.f32")).write_bytes(
            self.tsdf.astype("<f4").tobytes())
        (prefix.parent / (prefix.name + ".weight.f32")).write_bytes(
            self.weight.astype("<f4").tobytes())
        sidecar = {"origin": [float(v) for v in self.origin],
                   "voxel_size": self.voxel_size,
                   "dims": list(self.dims),
                   "truncation": self.truncation,
                   "w_max": self.w_max}
        (prefix.parent / (prefix.name + ".json")).write_text(json.dumps(sidecar, indent=2) + "\n")

    @staticmethod
    def load(prefix) -> "TsdfVolume":
        prefix = Path(prefix)
        sidecar = json.loads((prefix.parent / (prefix.name + ".json")).read_text())
        dims = tuple(sidecar["dims"])
        tsdf = np.frombuffer((prefix.parent / (prefix.name + ".tsdf.f32")).read_bytes(),
                             dtype="<f4").reshape(dims).astype(np.float64)
        weight = np.frombuffer((prefix.parent / (prefix.name + ".weight.f32")).read_bytes(),
                               dtype="<f4").reshape(dims).astype(np.float64)
        return TsdfVolume(np.array(sidecar["origin"]), sidecar["voxel_size"], dims,
                          sidecar["truncation"], sidecar["w_max"],
                          tsdf=tsdf, weight=weight)
