"""Analytic ground-truth scenes: time-varying SDFs with colors.

Scenes stand in for real captures. Each generator produces exact (or
Lipschitz-normalized) signed distance fields, so fusion and
reconstruction accuracy can be measured against closed-form geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera import CameraIntrinsics, CameraPose, look_at_pose
from .frames import ColorFrame, DepthFrame, NoiseParams, add_sensor_noise
from .mesh import TriangleMesh
from .rng import substream
from .tsdf import TsdfVolume

SPHERE_TRACE_SAFETY = 0.9
SPHERE_TRACE_MAX_STEPS = 256
SPHERE_TRACE_TOL = 1e-5


class SceneError(ValueError):
    """Unknown or malformed scene description."""


@dataclass
class AnalyticScene:
    name: str
    sdf: Callable[[float, np.ndarray], np.ndarray]  # (t, (N,3)) -> (N,)
    color: Callable[[float, np.ndarray], np.ndarray]  # (t, (N,3)) -> (N,3)
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    time_range: tuple[float, float] = (0.0, 10.0)
    topology_events: tuple[int, ...] = ()  # frame indices where component count changes

    def surface_points(self, t: float, n: int, rng: np.random.Generator,
                       newton_steps: int = 8) -> np.ndarray:
        """Random points projected onto the zero level set by SDF descent."""
        span = self.bounds_hi - self.bounds_lo
        pts = self.bounds_lo + rng.random((4 * n, 3)) * span
        for _ in range(newton_steps):
            d = self.sdf(t, pts)
            grad = _sdf_gradient(self.sdf, t, pts)
            pts = pts - grad * d[:, None]
        d = np.abs(self.sdf(t, pts))
        order = np.argsort(d)
        return pts[order[:n]]


def _sdf_gradient(sdf, t, pts, h=1e-5):
    g = np.zeros_like(pts)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        g[:, ax] = (sdf(t, pts + e) - sdf(t, pts - e)) / (2 * h)
    return g


# --- SDF primitives -------------------------------------------------------

def _sd_sphere(pts, center, radius):
    return np.linalg.norm(pts - center, axis=-1) - radius


def _sd_capsule(pts, a, b, radius):
    pa = pts - a
    ba = np.asarray(b) - np.asarray(a)
    h = np.clip(pa @ ba / (ba @ ba), 0.0, 1.0)
    return np.linalg.norm(pa - h[:, None] * ba, axis=-1) - radius


def _smooth_min(d1, d2, k):
    h = np.clip(0.5 + 0.5 * (d2 - d1) / k, 0.0, 1.0)
    return d2 * (1 - h) + d1 * h - k * h * (1 - h)


# --- Scene generators -----------------------------------------------------

def _scene_sphere(spec):
    center = np.array(spec.get("center", (0.0, 0.0, 0.0)))
    radius = float(spec.get("radius", 0.5))

    def sdf(t, pts):
        return _sd_sphere(np.asarray(pts, dtype=np.float64), center, radius)

    def color(t, pts):
        return np.full((len(np.atleast_2d(pts)), 3), 0.7)

    margin = 0.3
    return AnalyticScene("sphere", sdf, color,
                         center - radius - margin, center + radius + margin)


def _scene_wrinkled_sphere(spec):
    center = np.array(spec.get("center", (0.0, 0.0, 0.0)))
    radius = float(spec.get("radius", 0.5))
    amplitude = float(spec.get("amplitude", 0.005))
    freq = float(spec.get("frequency", 20.0))  # rad/m
    # Product-of-sines bump field has gradient bound sqrt(3)*freq, so the
    # displaced field is (1 + amplitude*freq*sqrt(3))-Lipschitz; divide it
    # out to keep the scene contract (zero set unchanged).
    lipschitz = 1.0 + amplitude * freq * np.sqrt(3.0)

    def sdf(t, pts):
        pts = np.asarray(pts, dtype=np.float64)
        p = pts - center
        bump = np.sin(freq * p[..., 0]) * np.sin(freq * p[..., 1]) * np.sin(freq * p[..., 2])
        return (np.linalg.norm(p, axis=-1) - radius - amplitude * bump) / lipschitz

    def color(t, pts):
        return np.full((len(np.atleast_2d(pts)), 3), 0.6)

    margin = 0.3
    return AnalyticScene("wrinkled_sphere", sdf, color,
                         center - radius - margin, center + radius + margin)


def _scene_bending_capsule(spec):
    radius = float(spec.get("radius", 0.12))
    length = float(spec.get("length", 0.6))
    bend_rate = float(spec.get("bend_rate", 0.06))  # rad per frame
    # Two-segment elbow: fixed lower segment, upper segment rotates about
    # the joint over time. Union of exact capsule SDFs stays exact.
    joint = np.array([0.0, 0.0, 0.0])
    base = np.array([0.0, -length / 2, 0.0])

    def tip(t):
        ang = bend_rate * t
        return joint + (length / 2) * np.array([np.sin(ang), np.cos(ang), 0.0])

    def sdf(t, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.minimum(_sd_capsule(pts, base, joint, radius),
                          _sd_capsule(pts, joint, tip(t), radius))

    def color(t, pts):
        return np.full((len(np.atleast_2d(pts)), 3), 0.55)

    reach = length / 2 + radius + 0.3
    return AnalyticScene("bending_capsule", sdf, color,
                         np.array([-reach, -reach, -reach]), np.array([reach, reach, reach]))


def _scene_splitting_blobs(spec):
    radius = float(spec.get("radius", 0.22))
    smooth_k = float(spec.get("smooth_k", 0.08))
    speed = float(spec.get("speed", 0.035))  # meters per frame per blob
    start_gap = float(spec.get("start_gap", 0.1))

    def centers(t):
        off = start_gap / 2 + speed * t
        return np.array([-off, 0.0, 0.0]), np.array([off, 0.0, 0.0])

    def sdf(t, pts):
        pts = np.asarray(pts, dtype=np.float64)
        c1, c2 = centers(t)
        return _smooth_min(_sd_sphere(pts, c1, radius), _sd_sphere(pts, c2, radius), smooth_k)

    def color(t, pts):
        return np.full((len(np.atleast_2d(pts)), 3), 0.65)

    # Neck pinches off when smin at the midpoint turns positive:
    # off - radius - k/4 > 0; annotate the first integer frame past that.
    event = int(np.floor((radius + smooth_k / 4 - start_gap / 2) / speed)) + 1
    reach = radius + start_gap / 2 + speed * 12 + 0.3
    return AnalyticScene("splitting_blobs", sdf, color,
                         np.array([-reach, -0.6, -0.6]), np.array([reach, 0.6, 0.6]),
                         topology_events=(event,))


def _scene_two_tone_sphere(spec):
    center = np.array(spec.get("center", (0.0, 0.0, 0.0)))
    radius = float(spec.get("radius", 0.5))
    tone_a = np.array(spec.get("tone_a", (0.9, 0.15, 0.1)))
    tone_b = np.array(spec.get("tone_b", (0.1, 0.2, 0.9)))

    def sdf(t, pts):
        return _sd_sphere(np.asarray(pts, dtype=np.float64), center, radius)

    def color(t, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        side = (pts[:, 0] - center[0]) > 0
        return np.where(side[:, None], tone_a, tone_b)

    margin = 0.3
    return AnalyticScene("two_tone_sphere", sdf, color,
                         center - radius - margin, center + radius + margin)


def _scene_capsule_over_sphere(spec):
    """Arm-over-body analog: capsule floating in front of a larger sphere."""
    body_center = np.array(spec.get("body_center", (0.0, 0.0, 0.0)))
    body_radius = float(spec.get("body_radius", 0.3))
    arm_radius = float(spec.get("arm_radius", 0.06))
    arm_offset = float(spec.get("arm_offset", 0.45))  # toward -z (camera side)
    arm_half = float(spec.get("arm_half_length", 0.25))

    a = body_center + np.array([0.0, -arm_half, -arm_offset])
    b = body_center + np.array([0.0, arm_half, -arm_offset])

    def sdf(t, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return np.minimum(_sd_sphere(pts, body_center, body_radius),
                          _sd_capsule(pts, a, b, arm_radius))

    def color(t, pts):
        return np.full((len(np.atleast_2d(pts)), 3), 0.6)

    reach = body_radius + arm_offset + 0.3
    return AnalyticScene("capsule_over_sphere", sdf, color,
                         body_center - reach, body_center + reach)


_GENERATORS = {
    "sphere": _scene_sphere,
    "wrinkled_sphere": _scene_wrinkled_sphere,
    "bending_capsule": _scene_bending_capsule,
    "splitting_blobs": _scene_splitting_blobs,
    "two_tone_sphere": _scene_two_tone_sphere,
    "capsule_over_sphere": _scene_capsule_over_sphere,
}


def build_scene(spec: dict | str) -> AnalyticScene:
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind not in _GENERATORS:
        raise SceneError(f"unknown scene kind {kind!r}; known: {sorted(_GENERATORS)}")
    return _GENERATORS[kind](spec)


# --- Camera rig and rendering --------------------------------------------

def ring_cameras(n_views: int = 3, ring_radius: float = 2.0, height: float = 0.0,
                 target=(0.0, 0.0, 0.0), width: int = 512, height_px: int = 512,
                 focal: float = 550.0,
                 stagger: float = 0.0) -> list[tuple[CameraIntrinsics, CameraPose]]:
    """n cameras on a ring, all aimed at the target. `stagger` alternates
    cameras between +/- that height offset (closes polar blind spots)."""
    target = np.asarray(target, dtype=np.float64)
    views = []
    intr = CameraIntrinsics(focal, focal, width / 2.0, height_px / 2.0, width, height_px)
    for k in range(n_views):
        ang = 2 * np.pi * k / n_views
        h = height + (stagger if k % 2 == 0 else -stagger)
        eye = target + np.array([ring_radius * np.sin(ang), h, -ring_radius * np.cos(ang)])
        views.append((intr, look_at_pose(eye, target)))
    return views


def sphere_trace(scene: AnalyticScene, t: float, origins: np.ndarray,
                 directions: np.ndarray, max_dist: float = 10.0) -> np.ndarray:
    """Ray-march each ray to |sdf| < tol. Returns hit distance, inf on miss."""
    n = len(origins)
    dist = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(SPHERE_TRACE_MAX_STEPS):
        if not active.any():
            break
        pts = origins[active] + directions[active] * dist[active, None]
        d = scene.sdf(t, pts)
        newly_hit = np.abs(d) < SPHERE_TRACE_TOL
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        # Signed step: slight overshoot past the surface self-corrects.
        dist[idx] += SPHERE_TRACE_SAFETY * d
        escaped = dist[idx] > max_dist
        active[idx[newly_hit | escaped]] = False
    out = np.where(hit, dist, np.inf)
    return out


def render_scene_views(scene: AnalyticScene, t: float,
                       cameras: list[tuple[CameraIntrinsics, CameraPose]],
                       noise: NoiseParams | None = None, seed: int = 0,
                       timestamp_index: int | None = None,
                       depth_max: float = 10.0):
    """Sphere-traced RGBD render per camera. Returns list of (DepthFrame, ColorFrame)."""
    if timestamp_index is None:
        timestamp_index = int(round(t))
    frames = []
    for view_index, (intr, pose) in enumerate(cameras):
        xs, ys = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                             np.arange(intr.height, dtype=np.float64))
        dirs_cam = np.stack([(xs - intr.cx) / intr.fx,
                             (ys - intr.cy) / intr.fy,
                             np.ones_like(xs)], axis=-1).reshape(-1, 3)
        dirs_world = dirs_cam @ pose.rotation  # R^T @ d
        norms = np.linalg.norm(dirs_world, axis=1, keepdims=True)
        dirs_unit = dirs_world / norms
        center = pose.center
        origins = np.broadcast_to(center, dirs_unit.shape)

        hit_dist = sphere_trace(scene, t, origins, dirs_unit, max_dist=depth_max)
        hit = np.isfinite(hit_dist)
        # Depth = camera-space z = distance along the unit ray * cos factor.
        z = np.where(hit, hit_dist / norms[:, 0], 0.0)
        depth = z.reshape(intr.height, intr.width)
        depth_frame = DepthFrame(depth, intr, pose, timestamp_index, depth_max)

        rgb = np.full((len(dirs_unit), 3), 0.0)
        if hit.any():
            pts = center + dirs_unit[hit] * hit_dist[hit, None]
            rgb[hit] = np.clip(scene.color(t, pts), 0.0, 1.0)
        color_frame = ColorFrame(rgb.reshape(intr.height, intr.width, 3),
                                 intr, pose, timestamp_index)

        if noise is not None:
            depth_frame = add_sensor_noise(depth_frame,
                                           seed=seed * 1000003 + view_index, params=noise)
        frames.append((depth_frame, color_frame))
    return frames


def ground_truth_mesh(scene: AnalyticScene, t: float, resolution: int = 128) -> TriangleMesh:
    """Marching cubes over exact SDF samples at the given lattice resolution."""
    lo, hi = scene.bounds_lo, scene.bounds_hi
    voxel = float((hi - lo).max() / (resolution - 1))
    vol = TsdfVolume.from_bounds(lo, hi, voxel)
    pts = vol.voxel_centers()
    sdf = scene.sdf(t, pts).reshape(vol.dims)
    vol.tsdf = np.clip(sdf / vol.truncation, -1.0, 1.0)
    vol.weight = np.ones(vol.dims)
    return vol.extract_mesh()
