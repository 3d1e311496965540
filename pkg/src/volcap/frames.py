"""Depth/color frame containers, bilinear depth sampling, TOF-style noise.

Depth value 0 marks an invalid pixel (sensor hole). Valid depths live in
(0, depth_max].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .rng import substream

DEPTH_MAX_DEFAULT = 10.0


@dataclass(frozen=True)
class DepthFrame:
    values: np.ndarray  # (H, W) meters, 0 = invalid
    intrinsics: CameraIntrinsics
    pose: CameraPose
    timestamp_index: int = 0
    depth_max: float = DEPTH_MAX_DEFAULT

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"depth shape {values.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}"
            )
        valid = values > 0
        if valid.any() and values[valid].max() > self.depth_max + 1e-9:
            raise ValueError("valid depths exceed depth_max")
        if (values < 0).any():
            raise ValueError("negative depth values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values > 0

    def with_values(self, values: np.ndarray) -> "DepthFrame":
        return DepthFrame(values, self.intrinsics, self.pose, self.timestamp_index, self.depth_max)


@dataclass(frozen=True)
class ColorFrame:
    values: np.ndarray  # (H, W, 3) in [0, 1]
    intrinsics: CameraIntrinsics
    pose: CameraPose
    timestamp_index: int = 0

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != (self.intrinsics.height, self.intrinsics.width, 3):
            raise ValueError(
                f"color shape {values.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}x3"
            )
        if values.min() < -1e-9 or values.max() > 1 + 1e-9:
            raise ValueError("color channels must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def sample_depth_bilinear(frame: DepthFrame, pixels: np.ndarray):
    """Bilinear depth lookup at continuous pixel coordinates.

    Returns (depths (N,), valid (N,)). A sample is invalid when the pixel
    is out of bounds or any of its 4 neighbors is a hole; valid and
    invalid depths are never mixed.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    squeeze = pixels.ndim == 1
    pixels = pixels.reshape(-1, 2)
    h, w = frame.values.shape

    x = pixels[:, 0]
    y = pixels[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    inside = (x >= 0) & (y >= 0) & (x0 <= w - 1) & (y0 <= h - 1) & (x <= w - 1) & (y <= h - 1)
    # Clamp so exact samples on the far edge use the edge texel.
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = np.clip(x - x0c, 0.0, 1.0)
    fy = np.clip(y - y0c, 0.0, 1.0)

    d00 = frame.values[y0c, x0c]
    d01 = frame.values[y0c, x0c + 1]
    d10 = frame.values[y0c + 1, x0c]
    d11 = frame.values[y0c + 1, x0c + 1]
    neighbors_ok = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    valid = inside & neighbors_ok

    depths = (d00 * (1 - fx) * (1 - fy) + d01 * fx * (1 - fy)
              + d10 * (1 - fx) * fy + d11 * fx * fy)
    depths = np.where(valid, depths, 0.0)
    if squeeze:
        return float(depths[0]), bool(valid[0])
    return depths, valid


@dataclass(frozen=True)
class NoiseParams:
    """Axial Gaussian noise sigma(z) = base + quad * z^2, plus edge dropout.

    Defaults approximate a quadratic TOF model; they are this artifact's
    declared defaults, not measured sensor constants.
    """

    sigma_base: float = 0.0015  # meters
    sigma_quad: float = 0.001  # meters per meter^2
    dropout_prob: float = 0.2
    edge_gradient_threshold: float = 0.05  # meters per pixel

    @staticmethod
    def zero() -> "NoiseParams":
        return NoiseParams(0.0, 0.0, 0.0, 0.05)


def add_sensor_noise(frame: DepthFrame, seed: int, params: NoiseParams) -> DepthFrame:
    """Inject depth-dependent Gaussian noise and edge dropout, deterministically."""
    rng = substream(seed, "sensor_noise")
    values = np.array(frame.values)
    valid = values > 0

    if params.sigma_base != 0.0 or params.sigma_quad != 0.0:
        sigma = params.sigma_base + params.sigma_quad * values**2
        noise = rng.standard_normal(values.shape) * sigma
        values = np.where(valid, values + noise, 0.0)
        values = np.clip(values, 0.0, frame.depth_max)
    elif params.dropout_prob > 0:
        # Keep the stream layout stable: draws happen whether or not
        # the gaussian stage is enabled.
        rng.standard_normal(values.shape)

    if params.dropout_prob > 0:
        gy, gx = np.gradient(frame.values)
        grad_mag = np.hypot(gx, gy)
        near_edge = valid & (grad_mag > params.edge_gradient_threshold)
        drop = rng.random(values.shape) < params.dropout_prob
        values = np.where(near_edge & drop, 0.0, values)

    return frame.with_values(values)
