"""Software re-rendering of fused meshes into the capture viewpoints.

Perspective-correct z-buffer rasterization plus visibility-weighted
projection of input colors onto mesh vertices; a ray-cast path serves as
the independent oracle for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .camera import CameraIntrinsics, CameraPose
from .frames import ColorFrame, DepthFrame, sample_depth_bilinear
from .mesh import TriangleMesh

UNCOLORED_SENTINEL = 0.5
DEPTH_CONSISTENCY_TOL = 0.01  # meters


@dataclass
class RenderTarget:
    depth: DepthFrame
    color: ColorFrame | None
    mask: np.ndarray  # (H, W) bool, True where depth valid

    def __post_init__(self):
        if not np.array_equal(self.mask, self.depth.values > 0):
            raise ValueError("mask must equal depth validity")


@njit(cache=True)
def _rasterize(verts_cam, tris, attrs, width, height, fx, fy, cx, cy, near):
    """Z-buffer rasterization with perspective-correct attribute
    interpolation. Returns (depth (H,W), attr (H,W,C)). Triangles with
    any vertex at z <= near are skipped (no near-plane clipping)."""
    zbuf = np.full((height, width), np.inf)
    n_attr = attrs.shape[1]
    abuf = np.zeros((height, width, n_attr))
    for t in range(len(tris)):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        z0 = verts_cam[i0, 2]
        z1 = verts_cam[i1, 2]
        z2 = verts_cam[i2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0 = fx * verts_cam[i0, 0] / z0 + cx
        y0 = fy * verts_cam[i0, 1] / z0 + cy
        x1 = fx * verts_cam[i1, 0] / z1 + cx
        y1 = fy * verts_cam[i1, 1] / z1 + cy
        x2 = fx * verts_cam[i2, 0] / z2 + cx
        y2 = fy * verts_cam[i2, 1] / z2 + cy

        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        lo_x = max(int(np.floor(min(x0, min(x1, x2)))), 0)
        hi_x = min(int(np.ceil(max(x0, max(x1, x2)))), width - 1)
        lo_y = max(int(np.floor(min(y0, min(y1, y2)))), 0)
        hi_y = min(int(np.ceil(max(y0, max(y1, y2)))), height - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        inv_z0 = 1.0 / z0
        inv_z1 = 1.0 / z1
        inv_z2 = 1.0 / z2
        for py in range(lo_y, hi_y + 1):
            for px in range(lo_x, hi_x + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                inv_z = w0 * inv_z0 + w1 * inv_z1 + w2 * inv_z2
                z = 1.0 / inv_z
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    for c in range(n_attr):
                        # perspective-correct: interpolate attr/z
                        abuf[py, px, c] = z * (w0 * attrs[i0, c] * inv_z0
                                               + w1 * attrs[i1, c] * inv_z1
                                               + w2 * attrs[i2, c] * inv_z2)
    return zbuf, abuf


def _backface_mask(mesh: TriangleMesh, pose: CameraPose) -> np.ndarray:
    """Triangles facing the camera (meshes from marching cubes are
    consistently wound, outward normals)."""
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    fn = mesh.face_normals()
    to_tri = v0 - pose.center
    return np.einsum("ij,ij->i", fn, to_tri) < 0.0


def render_depth(mesh: TriangleMesh, intrinsics: CameraIntrinsics, pose: CameraPose,
                 timestamp_index: int = 0, near: float = 1e-6) -> RenderTarget:
    """Rasterize mesh depth; pixels with no hit are invalid (0)."""
    if mesh.is_empty():
        depth = DepthFrame(np.zeros((intrinsics.height, intrinsics.width)),
                           intrinsics, pose, timestamp_index)
        return RenderTarget(depth, None, depth.values > 0)
    cam = pose.world_to_camera(mesh.vertices)
    front = _backface_mask(mesh, pose)
    tris = np.ascontiguousarray(mesh.triangles[front])
    zbuf, _ = _rasterize(cam, tris, np.zeros((len(cam), 0)),
                         intrinsics.width, intrinsics.height,
                         intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                         near)
    values = np.where(np.isfinite(zbuf), zbuf, 0.0)
    depth = DepthFrame(values, intrinsics, pose, timestamp_index,
                       depth_max=max(10.0, float(values.max()) + 1.0))
    return RenderTarget(depth, None, depth.values > 0)


def render_color(mesh: TriangleMesh, intrinsics: CameraIntrinsics, pose: CameraPose,
                 timestamp_index: int = 0, near: float = 1e-6):
    """Rasterize depth + barycentric vertex colors.

    Missing colors render as the 0.5 gray sentinel; the second return
    flags that case."""
    missing_colors = mesh.colors is None
    if mesh.is_empty():
        depth = DepthFrame(np.zeros((intrinsics.height, intrinsics.width)),
                           intrinsics, pose, timestamp_index)
        color = ColorFrame(np.zeros((intrinsics.height, intrinsics.width, 3)),
                           intrinsics, pose, timestamp_index)
        return RenderTarget(depth, color, depth.values > 0), missing_colors
    colors = (np.full((mesh.n_vertices, 3), UNCOLORED_SENTINEL)
              if missing_colors else mesh.colors)
    cam = pose.world_to_camera(mesh.vertices)
    front = _backface_mask(mesh, pose)
    tris = np.ascontiguousarray(mesh.triangles[front])
    zbuf, abuf = _rasterize(cam, tris, np.ascontiguousarray(colors),
                            intrinsics.width, intrinsics.height,
                            intrinsics.fx, intrinsics.fy, intrinsics.cx,
                            intrinsics.cy, near)
    hit = np.isfinite(zbuf)
    values = np.where(hit, zbuf, 0.0)
    rgb = np.clip(np.where(hit[:, :, None], abuf, 0.0), 0.0, 1.0)
    depth = DepthFrame(values, intrinsics, pose, timestamp_index,
                       depth_max=max(10.0, float(values.max()) + 1.0))
    color = ColorFrame(rgb, intrinsics, pose, timestamp_index)
    return RenderTarget(depth, color, depth.values > 0), missing_colors


def raycast_depth(mesh: TriangleMesh, intrinsics: CameraIntrinsics, pose: CameraPose,
                  pixels: np.ndarray) -> np.ndarray:
    """Independent per-pixel ray-cast oracle (Moller-Trumbore over all
    triangles). Returns camera-space depth per pixel, 0 on miss."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    dirs_cam = np.stack([(pixels[:, 0] - intrinsics.cx) / intrinsics.fx,
                         (pixels[:, 1] - intrinsics.cy) / intrinsics.fy,
                         np.ones(len(pixels))], axis=1)
    dirs = dirs_cam @ pose.rotation
    origin = pose.center

    v0 = mesh.vertices[mesh.triangles[:, 0]]
    e1 = mesh.vertices[mesh.triangles[:, 1]] - v0
    e2 = mesh.vertices[mesh.triangles[:, 2]] - v0
    out = np.zeros(len(pixels))
    for i, d in enumerate(dirs):
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-14
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = np.einsum("j,ij->i", d, qvec) * inv_det
        t = np.einsum("ij,ij->i", e2, qvec) * inv_det
        hit = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > 1e-9)
        if hit.any():
            # rays are scaled to unit camera z, so t is camera depth
            out[i] = t[hit].min()
    return out


def project_colors_to_mesh(mesh: TriangleMesh, color_frames: list[ColorFrame],
                           depth_frames: list[DepthFrame]) -> TriangleMesh:
    """Vertex colors from visibility-and-angle weighted view averages.

    A view contributes when the vertex passes its depth-consistency test
    (|projected z - sampled depth| < 1 cm); weight is the incidence
    cosine. Vertices visible nowhere get the gray sentinel."""
    accum = np.zeros((mesh.n_vertices, 3))
    wsum = np.zeros(mesh.n_vertices)
    for cframe, dframe in zip(color_frames, depth_frames):
        intr = dframe.intrinsics
        cam = dframe.pose.world_to_camera(mesh.vertices)
        z = cam[:, 2]
        front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            px = intr.fx * cam[:, 0] / z + intr.cx
            py = intr.fy * cam[:, 1] / z + intr.cy
        pix = np.stack([px, py], axis=1)
        pix[~front] = -1.0
        depths, valid = sample_depth_bilinear(dframe, pix)
        consistent = front & valid & (np.abs(z - depths) < DEPTH_CONSISTENCY_TOL)

        view_dir = mesh.vertices - dframe.pose.center
        view_dir /= np.maximum(np.linalg.norm(view_dir, axis=1, keepdims=True), 1e-12)
        weight = np.maximum(0.0, -np.einsum("ij,ij->i", mesh.normals, view_dir))
        weight = np.where(consistent, weight, 0.0)

        use = weight > 0
        if use.any():
            ix = np.clip(np.round(px[use]).astype(np.int64), 0, intr.width - 1)
            iy = np.clip(np.round(py[use]).astype(np.int64), 0, intr.height - 1)
            accum[use] += weight[use, None] * cframe.values[iy, ix]
            wsum[use] += weight[use]

    colored = wsum > 0
    colors = np.full((mesh.n_vertices, 3), UNCOLORED_SENTINEL)
    colors[colored] = accum[colored] / wsum[colored, None]
    return TriangleMesh(mesh.vertices.copy(), mesh.triangles.copy(),
                        mesh.normals.copy(), colors)


def rerender_views(mesh: TriangleMesh, views: list[tuple[CameraIntrinsics, CameraPose]],
                   timestamp_index: int = 0):
    """Depth+color re-render of a colored mesh into every view."""
    out = []
    for intr, pose in views:
        target, _ = render_color(mesh, intr, pose, timestamp_index)
        out.append(target)
    return out
