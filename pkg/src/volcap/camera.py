"""Pinhole camera model: intrinsics, world->camera poses, projection.

Conventions: images are row-major with origin at the top-left, pixel
centers at integer coordinates. Camera looks down +z; a pose maps world
points into camera coordinates via p_cam = R @ p_world + t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-6


class OutOfFrustumError(ValueError):
    """Point projects behind the camera (camera-space z <= 0)."""


class InvalidDepthError(ValueError):
    """Depth must be strictly positive."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def to_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """World -> camera rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(rot @ rot.T - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError(f"rotation determinant {np.linalg.det(rot)} != +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def project(point, intrinsics: CameraIntrinsics, pose: CameraPose):
    """Perspective-project one world point. Returns (pixel (2,), depth).

    Raises OutOfFrustumError if the point lies at or behind the camera
    plane (z <= 0). "In frustum" here means z > 0 only; callers clip to
    the image rectangle themselves where it matters.
    """
    cam = pose.world_to_camera(np.asarray(point, dtype=np.float64))
    z = cam[2]
    if z <= 0:
        raise OutOfFrustumError(f"point has camera-space z={z}")
    pixel = np.array([intrinsics.fx * cam[0] / z + intrinsics.cx,
                      intrinsics.fy * cam[1] / z + intrinsics.cy])
    return pixel, float(z)


def project_batch(points: np.ndarray, intrinsics: CameraIntrinsics, pose: CameraPose):
    """Vectorized projection. Returns (pixels (N,2), depths (N,), in_front (N,)).

    Pixels for points with z <= 0 are set to NaN instead of raising.
    """
    cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        py = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    pixels = np.stack([px, py], axis=1)
    pixels[~in_front] = np.nan
    return pixels, z, in_front


def unproject(pixel, depth: float, intrinsics: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Inverse of project for a single (pixel, depth). Returns world point."""
    if depth <= 0:
        raise InvalidDepthError(f"depth must be > 0, got {depth}")
    pixel = np.asarray(pixel, dtype=np.float64)
    cam = np.array([(pixel[0] - intrinsics.cx) / intrinsics.fx * depth,
                    (pixel[1] - intrinsics.cy) / intrinsics.fy * depth,
                    depth])
    return pose.camera_to_world(cam)


def unproject_batch(pixels: np.ndarray, depths: np.ndarray,
                    intrinsics: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    cam = np.stack([(pixels[:, 0] - intrinsics.cx) / intrinsics.fx * depths,
                    (pixels[:, 1] - intrinsics.cy) / intrinsics.fy * depths,
                    depths], axis=1)
    return pose.camera_to_world(cam)


def look_at_pose(eye, target, up=(0.0, 1.0, 0.0)) -> CameraPose:
    """Pose for a camera at `eye` looking toward `target` (+z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:  # forward parallel to up: pick another up
        up = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        nrm = np.linalg.norm(right)
    right = right / nrm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=0)
    translation = -rotation @ eye
    return CameraPose(rotation, translation)
