import numpy as np
import pytest
from hypothesis import given, strategies as st

from volcap.camera import (CameraIntrinsics, CameraPose, InvalidDepthError,
                           OutOfFrustumError, look_at_pose, project,
                           project_batch, unproject, unproject_batch)


INTR = CameraIntrinsics(500.0, 500.0, 256.0, 256.0, 512, 512)
IDENTITY = CameraPose.identity()


def test_project_optical_axis():
    pixel, depth = project([0.0, 0.0, 2.0], INTR, IDENTITY)
    assert np.allclose(pixel, [256.0, 256.0])
    assert depth == pytest.approx(2.0)


def test_project_offset_point():
    # pinhole: 500 * 0.1 / 1 + 256 = 306
    pixel, depth = project([0.1, 0.0, 1.0], INTR, IDENTITY)
    assert np.allclose(pixel, [306.0, 256.0])
    assert depth == pytest.approx(1.0)


def test_project_behind_camera_raises():
    with pytest.raises(OutOfFrustumError):
        project([0.0, 0.0, -0.5], INTR, IDENTITY)


def test_unproject_principal_point():
    p = unproject([256.0, 256.0], 1.0, INTR, IDENTITY)
    assert np.allclose(p, [0.0, 0.0, 1.0])


def test_unproject_inverse_of_project_example():
    p = unproject([306.0, 256.0], 1.0, INTR, IDENTITY)
    assert np.allclose(p, [0.1, 0.0, 1.0])


def test_unproject_nonpositive_depth_raises():
    with pytest.raises(InvalidDepthError):
        unproject([10.0, 10.0], 0.0, INTR, IDENTITY)


@given(st.floats(0.0, 511.0), st.floats(0.0, 511.0), st.floats(0.01, 9.0))
def test_roundtrip_project_unproject(px, py, depth):
    pose = look_at_pose([1.0, 0.5, -2.0], [0.0, 0.0, 0.5])
    world = unproject([px, py], depth, INTR, pose)
    pixel, z = project(world, INTR, pose)
    assert np.abs(pixel - [px, py]).max() < 1e-6
    assert abs(z - depth) < 1e-6


def test_batch_matches_scalar():
    pose = look_at_pose([0.3, -0.2, -1.5], [0, 0, 0.2])
    rng = np.random.default_rng(7)
    pts = rng.normal(0, 0.3, size=(50, 3))
    pixels, depths, in_front = project_batch(pts, INTR, pose)
    for i in range(len(pts)):
        if in_front[i]:
            pixel, depth = project(pts[i], INTR, pose)
            assert np.allclose(pixel, pixels[i])
            assert depth == pytest.approx(depths[i])


def test_unproject_batch_matches_scalar():
    pose = look_at_pose([0.0, 1.0, -2.0], [0, 0, 0])
    pixels = np.array([[10.0, 30.0], [256.0, 256.0], [500.0, 12.0]])
    depths = np.array([0.5, 2.0, 3.3])
    batch = unproject_batch(pixels, depths, INTR, pose)
    for i in range(3):
        assert np.allclose(batch[i], unproject(pixels[i], depths[i], INTR, pose))


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 500.0, 256.0, 256.0, 512, 512)
    with pytest.raises(ValueError):
        CameraIntrinsics(500.0, 500.0, 600.0, 256.0, 512, 512)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        CameraPose(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det -1


def test_look_at_points_camera_at_target():
    eye = np.array([0.0, 0.0, -2.0])
    pose = look_at_pose(eye, [0.0, 0.0, 0.0])
    cam = pose.world_to_camera(np.array([[0.0, 0.0, 0.0]]))[0]
    assert np.allclose(cam, [0.0, 0.0, 2.0], atol=1e-12)
    assert np.allclose(pose.center, eye)
