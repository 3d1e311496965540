import numpy as np
import pytest

from volcap.camera import CameraIntrinsics, CameraPose, look_at_pose
from volcap.frames import DepthFrame
from volcap.scenes import build_scene, render_scene_views, ring_cameras
from volcap.tsdf import TsdfVolume


def flat_depth_frame(depth, w=64, h=64, focal=80.0):
    intr = CameraIntrinsics(focal, focal, w / 2, h / 2, w, h)
    return DepthFrame(np.full((h, w), depth), intr, CameraPose.identity())


def brute_force_trilinear(vol, p):
    g = (np.asarray(p) - vol.origin) / vol.voxel_size
    i0 = np.floor(g).astype(int)
    f = g - i0
    acc = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0])
                     * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                acc += w * vol.tsdf[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return acc


def test_integrate_surface_voxel_zero():
    vol = TsdfVolume([-0.05, -0.05, 1.95], 0.05, (3, 3, 3))
    frame = flat_depth_frame(2.0)
    vol.integrate_depth(frame)
    # center voxel sits exactly on the observed plane z=2
    assert vol.tsdf[1, 1, 1] == pytest.approx(0.0, abs=1e-9)
    assert vol.weight[1, 1, 1] == 1.0


def test_integrate_clamps_far_in_front():
    vol = TsdfVolume([-0.05, -0.05, 1.0], 0.05, (3, 3, 3))
    frame = flat_depth_frame(2.0)
    vol.integrate_depth(frame)
    # voxel at z=1.05 is 0.95m in front of the surface >> truncation 0.2
    assert vol.tsdf[1, 1, 1] == pytest.approx(1.0)


def test_integrate_skips_far_behind():
    vol = TsdfVolume([-0.05, -0.05, 2.95], 0.05, (3, 3, 3))
    frame = flat_depth_frame(2.0)
    vol.integrate_depth(frame)
    # ~1m behind the surface: untouched (weight 0)
    assert vol.weight[1, 1, 1] == 0.0


def test_sphere_zero_crossing_along_ray():
    scene = build_scene("sphere")
    cams = ring_cameras(1, width=128, height_px=128, focal=140.0)
    (depth_frame, _), = render_scene_views(scene, 0.0, cams)
    vol = TsdfVolume.from_bounds(scene.bounds_lo, scene.bounds_hi, 0.02)
    vol.integrate_depth(depth_frame)

    # walk the central camera ray, find tsdf sign change
    center = depth_frame.pose.center
    direction = -center / np.linalg.norm(center)
    ts = np.linspace(1.2, 1.8, 601)
    pts = center + ts[:, None] * direction
    tsdf, _, obs = vol.query_tsdf(pts)
    sign = np.sign(tsdf)
    crossings = np.nonzero((sign[:-1] > 0) & (sign[1:] <= 0) & obs[:-1] & obs[1:])[0]
    assert len(crossings) >= 1
    t_cross = ts[crossings[0]]
    assert abs(t_cross - 1.5) < vol.voxel_size / 2


def test_query_at_voxel_center_returns_stored():
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.1, (4, 4, 4))
    vol.tsdf[:] = 0.25
    vol.weight[:] = 2.0
    t, w, obs = vol.query_tsdf([[0.1, 0.2, 0.3]])
    assert obs[0] and t[0] == pytest.approx(0.25) and w[0] == pytest.approx(2.0)


def test_query_midway_linearity():
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.1, (4, 4, 4))
    vol.tsdf[:] = -0.2
    vol.tsdf[2:, :, :] = 0.2
    vol.weight[:] = 1.0
    t, _, obs = vol.query_tsdf([[0.15, 0.1, 0.1]])
    assert obs[0] and t[0] == pytest.approx(0.0, abs=1e-12)


def test_query_matches_brute_force_oracle():
    rng = np.random.default_rng(9)
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.07, (9, 9, 9))
    vol.tsdf[:] = rng.uniform(-1, 1, vol.dims)
    vol.weight[:] = rng.uniform(0.5, 3, vol.dims)
    pts = rng.uniform(0.0, 0.07 * 7.99, size=(200, 3))
    t, _, obs = vol.query_tsdf(pts)
    assert obs.all()
    expected = np.array([brute_force_trilinear(vol, p) for p in pts])
    assert np.abs(t - expected).max() < 1e-6


def test_query_outside_unobserved():
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.1, (4, 4, 4))
    vol.weight[:] = 1.0
    _, _, obs = vol.query_tsdf([[-1.0, 0.0, 0.0], [0.15, 0.15, 0.15]])
    assert not obs[0] and obs[1]


def test_query_weight_zero_corner_unobserved():
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.1, (4, 4, 4))
    vol.weight[:] = 1.0
    vol.weight[2, 2, 2] = 0.0
    _, _, obs = vol.query_tsdf([[0.15, 0.15, 0.15]])
    assert not obs[0]


def test_extract_all_free_space_empty():
    vol = TsdfVolume([0.0, 0.0, 0.0], 0.1, (8, 8, 8))
    vol.tsdf[:] = 1.0
    vol.weight[:] = 1.0
    assert vol.extract_mesh().is_empty()


def sphere_volume(radius=0.5, voxel=0.02, n=64):
    half = voxel * (n - 1) / 2
    vol = TsdfVolume([-half + 0.001, -half + 0.002, -half + 0.003], voxel, (n, n, n))
    pts = vol.voxel_centers()
    sdf = np.linalg.norm(pts, axis=1) - radius
    vol.tsdf = np.clip(sdf / vol.truncation, -1, 1).reshape(vol.dims)
    vol.weight = np.ones(vol.dims)
    return vol


def test_extract_sphere_accuracy():
    vol = sphere_volume()
    mesh = vol.extract_mesh()
    mesh.validate()
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).mean() < vol.voxel_size / 4


def test_extract_sphere_watertight_and_normals_outward():
    vol = sphere_volume()
    mesh = vol.extract_mesh()
    assert mesh.is_watertight()
    assert mesh.connected_component_count() == 1
    outward = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    cos = np.einsum("ij,ij->i", outward, mesh.normals)
    assert cos.min() > 0.9  # normals point toward positive tsdf (outside)


def test_extract_linear_field_exact():
    vol = TsdfVolume([0.0, 0.0, 0.45], 0.01, (12, 12, 12))
    pts = vol.voxel_centers()
    sdf = pts[:, 2] - 0.505
    vol.tsdf = np.clip(sdf / vol.truncation, -1, 1).reshape(vol.dims)
    vol.weight = np.ones(vol.dims)
    mesh = vol.extract_mesh()
    assert not mesh.is_empty()
    assert np.abs(mesh.vertices[:, 2] - 0.505).max() < vol.voxel_size / 10


def test_extract_skips_unobserved_cells():
    vol = sphere_volume()
    vol.weight[:32, :, :] = 0.0
    mesh = vol.extract_mesh()
    assert not mesh.is_empty()
    # no vertex strictly inside the unobserved half (allow the boundary plane)
    xmin = vol.origin[0] + 31 * vol.voxel_size
    assert (mesh.vertices[:, 0] >= xmin - 1e-9).all()


def test_repeat_integration_idempotent_value():
    scene = build_scene("sphere")
    cams = ring_cameras(1, width=64, height_px=64, focal=70.0)
    (frame, _), = render_scene_views(scene, 0.0, cams)
    vol_once = TsdfVolume.from_bounds(scene.bounds_lo, scene.bounds_hi, 0.04)
    vol_once.integrate_depth(frame)
    vol_many = TsdfVolume.from_bounds(scene.bounds_lo, scene.bounds_hi, 0.04)
    for _ in range(5):
        vol_many.integrate_depth(frame)
    assert np.abs(vol_once.tsdf - vol_many.tsdf).max() < 1e-6


def test_bounds_and_weight_cap():
    scene = build_scene("sphere")
    cams = ring_cameras(2, width=64, height_px=64, focal=70.0)
    frames = render_scene_views(scene, 0.0, cams)
    vol = TsdfVolume.from_bounds(scene.bounds_lo, scene.bounds_hi, 0.04, w_max=3.0)
    for _ in range(4):
        for df, _ in frames:
            vol.integrate_depth(df)
    assert np.abs(vol.tsdf).max() <= 1.0 + 1e-12
    assert vol.weight.max() <= 3.0
    assert vol.weight.min() >= 0.0


def test_volume_save_load_roundtrip(tmp_path):
    vol = sphere_volume(n=16)
    vol.save(tmp_path / "dump")
    back = TsdfVolume.load(tmp_path / "dump")
    assert back.dims == vol.dims
    assert np.allclose(back.tsdf, vol.tsdf, atol=1e-7)
    assert np.allclose(back.weight, vol.weight)
    assert np.allclose(back.origin, vol.origin)
