"""Frame and calibration file formats.

- Depth: 16-bit single-channel PNG, value = millimeters, 0 = invalid;
  or raw little-endian float32 grid ("VCDEPTH1" magic + u32 width/height).
- Color: 8-bit RGB PNG.
- Calibration: one JSON document per capture, array of per-view entries.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, CameraPose
from .frames import ColorFrame, DepthFrame

RAW_DEPTH_MAGIC = b"VCDEPTH1"


def save_depth_png(path, frame: DepthFrame) -> None:
    mm = np.round(frame.values * 1000.0).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(str(path))


def load_depth_png(path, intrinsics: CameraIntrinsics, pose: CameraPose,
                   timestamp_index: int = 0, depth_max: float = 10.0) -> DepthFrame:
    mm = np.asarray(Image.open(str(path)), dtype=np.uint16)
    return DepthFrame(mm.astype(np.float64) / 1000.0, intrinsics, pose,
                      timestamp_index, depth_max)


def save_depth_raw(path, frame: DepthFrame) -> None:
    h, w = frame.values.shape
    with open(path, "wb") as f:
        f.write(RAW_DEPTH_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(frame.values.astype("<f4").tobytes())


def load_depth_raw(path, intrinsics: CameraIntrinsics, pose: CameraPose,
                   timestamp_index: int = 0, depth_max: float = 10.0) -> DepthFrame:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != RAW_DEPTH_MAGIC:
            raise ValueError(f"bad raw depth magic {magic!r}")
        w, h = struct.unpack("<II", f.read(8))
        values = np.frombuffer(f.read(4 * w * h), dtype="<f4").reshape(h, w)
    return DepthFrame(values.astype(np.float64), intrinsics, pose, timestamp_index, depth_max)


def save_color_png(path, frame: ColorFrame) -> None:
    rgb = np.round(frame.values * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(str(path))


def load_color_png(path, intrinsics: CameraIntrinsics, pose: CameraPose,
                   timestamp_index: int = 0) -> ColorFrame:
    rgb = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.uint8)
    return ColorFrame(rgb.astype(np.float64) / 255.0, intrinsics, pose, timestamp_index)


def save_calibration(path, views: list[tuple[CameraIntrinsics, CameraPose]]) -> None:
    doc = {"views": []}
    for intr, pose in views:
        doc["views"].append({
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "rotation": [float(v) for v in pose.rotation.reshape(-1)],
            "translation": [float(v) for v in pose.translation],
        })
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_calibration(path) -> list[tuple[CameraIntrinsics, CameraPose]]:
    doc = json.loads(Path(path).read_text())
    views = []
    for v in doc["views"]:
        intr = CameraIntrinsics(v["fx"], v["fy"], v["cx"], v["cy"], v["width"], v["height"])
        pose = CameraPose(np.array(v["rotation"]).reshape(3, 3), np.array(v["translation"]))
        views.append((intr, pose))
    return views
