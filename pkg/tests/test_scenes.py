import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial import cKDTree

from volcap.camera import unproject_batch
from volcap.frames import NoiseParams
from volcap.mesh import sample_surface_points
from volcap.rng import substream
from volcap.scenes import (SceneError, build_scene, ground_truth_mesh,
                           ring_cameras, render_scene_views)


def component_count(scene, t, n=64):
    lo, hi = scene.bounds_lo, scene.bounds_hi
    axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = (scene.sdf(t, grid) < 0).reshape(n, n, n)
    _, count = ndimage.label(inside)
    return count


def test_unknown_scene_rejected():
    with pytest.raises(SceneError):
        build_scene("nonexistent_blob")


def test_static_sphere_time_invariant():
    scene = build_scene("sphere")
    rng = substream(0, "test")
    pts = rng.uniform(-0.8, 0.8, (500, 3))
    assert np.array_equal(scene.sdf(0.0, pts), scene.sdf(10.0, pts))


def test_splitting_blobs_component_counts():
    scene = build_scene("splitting_blobs")
    event = scene.topology_events[0]
    assert component_count(scene, event - 1.0) == 1
    assert component_count(scene, float(event)) == 2


def test_wrinkled_sphere_surface_sampler_consistency():
    scene = build_scene("wrinkled_sphere")
    rng = substream(1, "test")
    pts = scene.surface_points(0.0, 500, rng)
    assert np.abs(scene.sdf(0.0, pts)).max() < 1e-3


@pytest.mark.parametrize("kind", ["sphere", "wrinkled_sphere", "bending_capsule",
                                  "splitting_blobs", "two_tone_sphere",
                                  "capsule_over_sphere"])
def test_scenes_one_lipschitz(kind):
    scene = build_scene(kind)
    rng = substream(2, "test")
    span = scene.bounds_hi - scene.bounds_lo
    a = scene.bounds_lo + rng.random((4000, 3)) * span
    b = scene.bounds_lo + rng.random((4000, 3)) * span
    df = np.abs(scene.sdf(1.5, a) - scene.sdf(1.5, b))
    dx = np.linalg.norm(a - b, axis=1)
    assert (df <= dx * (1 + 1e-9) + 1e-12).all()


def test_render_center_pixel_depth():
    scene = build_scene("sphere")
    cams = ring_cameras(1, width=128, height_px=128, focal=140.0)
    (depth, _), = render_scene_views(scene, 0.0, cams)
    assert abs(depth.values[64, 64] - 1.5) < 1e-4


def test_render_deterministic():
    scene = build_scene("sphere")
    cams = ring_cameras(2, width=64, height_px=64, focal=70.0)
    a = render_scene_views(scene, 0.0, cams, noise=NoiseParams(), seed=3)
    b = render_scene_views(scene, 0.0, cams, noise=NoiseParams(), seed=3)
    for (da, ca), (db, cb) in zip(a, b):
        assert np.array_equal(da.values, db.values)
        assert np.array_equal(ca.values, cb.values)


def test_render_noiseless_depth_matches_sdf_zero():
    scene = build_scene("bending_capsule")
    cams = ring_cameras(1, width=96, height_px=96, focal=100.0)
    (depth, _), = render_scene_views(scene, 2.0, cams)
    valid = depth.valid_mask
    ys, xs = np.nonzero(valid)
    pick = substream(4, "test").choice(len(ys), size=min(300, len(ys)), replace=False)
    pix = np.stack([xs[pick], ys[pick]], axis=1).astype(float)
    pts = unproject_batch(pix, depth.values[ys[pick], xs[pick]],
                          depth.intrinsics, depth.pose)
    assert np.abs(scene.sdf(2.0, pts)).max() < 1e-4


def test_three_view_coverage_of_sphere():
    # r=0.5 at a 2 m ring self-occludes both poles (visibility ceiling
    # 94.9%), so the >95% coverage property is checked at r=0.35 where
    # the rig geometry allows it.
    scene = build_scene({"kind": "sphere", "radius": 0.35})
    cams = ring_cameras(3)  # paper-scale 512x512 rig
    frames = render_scene_views(scene, 0.0, cams)
    clouds = []
    for depth, _ in frames:
        ys, xs = np.nonzero(depth.valid_mask)
        pix = np.stack([xs, ys], axis=1).astype(float)
        clouds.append(unproject_batch(pix, depth.values[ys, xs],
                                      depth.intrinsics, depth.pose))
    cloud = np.concatenate(clouds)
    # area-sampled sphere points within 1 cm of the union cloud
    mesh = ground_truth_mesh(scene, 0.0, 96)
    samples, _ = sample_surface_points(mesh, 5000, substream(5, "test"))
    d, _ = cKDTree(cloud).query(samples)
    assert (d < 0.01).mean() > 0.95


def test_ground_truth_sphere_accuracy_and_watertight():
    scene = build_scene("sphere")
    mesh = ground_truth_mesh(scene, 0.0, 128)
    spacing = (scene.bounds_hi - scene.bounds_lo).max() / 127
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.abs(r - 0.5).max() < spacing / 4
    assert mesh.is_watertight()


def test_ground_truth_splitting_post_event_two_components():
    scene = build_scene("splitting_blobs")
    t = float(scene.topology_events[0] + 1)
    mesh = ground_truth_mesh(scene, t, 64)
    assert mesh.connected_component_count() == 2
    assert mesh.is_watertight()
