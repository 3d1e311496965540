"""Truncated projective signed distance feature.

For a query point q and one depth view: the along-ray difference between
q's camera depth and the observed depth at q's projection, clamped to
[-delta_p, delta_p]. Positive = behind the observed surface.
"""

from __future__ import annotations

import numpy as np

from ..frames import DepthFrame, sample_depth_bilinear

DELTA_P_DEFAULT = 0.01  # meters


def truncated_psdf(points: np.ndarray, depth_frame: DepthFrame,
                   delta_p: float = DELTA_P_DEFAULT, truncate: bool = True):
    """Per-point PSDF against one view.

    Returns (psdf (N,), valid (N,)); invalid where out of frustum or the
    bilinear depth lookup hits a hole. `truncate=False` gives the raw
    (unclamped) variant used by the ablation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    intr = depth_frame.intrinsics
    cam = depth_frame.pose.world_to_camera(points)
    z = cam[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intr.fx * cam[:, 0] / z + intr.cx
        py = intr.fy * cam[:, 1] / z + intr.cy
    pix = np.stack([px, py], axis=1)
    pix[~front] = -1.0
    depth, depth_ok = sample_depth_bilinear(depth_frame, pix)
    valid = front & depth_ok
    raw = np.where(valid, z - depth, 0.0)
    if truncate:
        raw = np.clip(raw, -delta_p, delta_p)
    return raw, valid
