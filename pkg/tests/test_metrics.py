import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from volcap.metrics import (MeshMetrics, TriangleBvh, UndefinedMetricError,
                            brute_force_nearest, chamfer, evaluate_mesh,
                            normal_consistency, point_to_surface)
from volcap.mesh import TriangleMesh
from volcap.rng import substream
from volcap.scenes import build_scene, ground_truth_mesh


def sphere_mesh(radius=1.0, resolution=96):
    scene = build_scene({"kind": "sphere", "radius": 0.5})
    mesh = ground_truth_mesh(scene, 0.0, resolution)
    scale = radius / 0.5
    return TriangleMesh(mesh.vertices * scale, mesh.triangles, mesh.normals)


def plane_pair(flip=False):
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    n = np.tile([0.0, 0.0, 1.0], (4, 1))
    a = TriangleMesh(verts, tris, n)
    b = TriangleMesh(verts.copy(), tris[:, ::-1].copy(), -n)
    return (a, b) if flip else (a, a)


def test_p2s_self_zero():
    mesh = sphere_mesh(resolution=48)
    assert point_to_surface(mesh, mesh, 5000, seed=1) < 1e-9


def test_p2s_concentric_spheres():
    a = sphere_mesh(1.0)
    b = sphere_mesh(1.001)
    d = point_to_surface(a, b, 20000, seed=2)
    assert abs(d - 0.001) < 0.05 * 0.001


def test_chamfer_concentric():
    a = sphere_mesh(1.0)
    b = sphere_mesh(1.002)
    d = chamfer(a, b, 20000, seed=3)
    assert abs(d - 0.002) < 0.05 * 0.002


def test_chamfer_identical_and_symmetric():
    a = sphere_mesh(1.0, resolution=48)
    assert chamfer(a, a, 5000, seed=4) < 1e-9
    b = sphere_mesh(1.003, resolution=48)
    assert chamfer(a, b, 5000, seed=5) == pytest.approx(chamfer(b, a, 5000, seed=5))


def test_bvh_matches_brute_force():
    mesh = sphere_mesh(1.0, resolution=32)
    rng = substream(6, "test")
    pts = rng.uniform(-1.3, 1.3, (100, 3))
    bvh = TriangleBvh(mesh)
    d_bvh, tri_bvh, _ = bvh.query(pts)
    d_bf, _ = brute_force_nearest(mesh, pts)
    assert np.abs(d_bvh - d_bf).max() < 1e-12


def test_normal_consistency_identical():
    mesh = sphere_mesh(1.0, resolution=64)
    nc = normal_consistency(mesh, mesh, 5000, seed=7)
    assert nc > 1 - 1e-3


def test_normal_consistency_flipped_plane():
    a, b = plane_pair(flip=True)
    nc = normal_consistency(a, b, 2000, seed=8)
    assert nc == pytest.approx(-1.0, abs=1e-9)


def test_normal_consistency_refined_sphere():
    a = sphere_mesh(1.0, resolution=48)
    b = sphere_mesh(1.0, resolution=96)
    assert normal_consistency(a, b, 10000, seed=9) > 0.99


def test_metrics_rigid_invariance():
    a = sphere_mesh(1.0, resolution=48)
    b = sphere_mesh(1.004, resolution=48)
    q = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    t = np.array([0.4, -0.1, 0.2])
    a2 = a.transformed(q, t)
    b2 = b.transformed(q, t)
    assert chamfer(a, b, 5000, seed=10) == pytest.approx(
        chamfer(a2, b2, 5000, seed=10), abs=1e-6)
    assert normal_consistency(a, b, 5000, seed=10) == pytest.approx(
        normal_consistency(a2, b2, 5000, seed=10), abs=1e-6)


def test_sampling_reproducible():
    a = sphere_mesh(1.0, resolution=48)
    b = sphere_mesh(1.002, resolution=48)
    assert point_to_surface(a, b, 3000, seed=11) == point_to_surface(a, b, 3000, seed=11)


def test_empty_mesh_rejected():
    a = sphere_mesh(1.0, resolution=32)
    with pytest.raises(UndefinedMetricError):
        point_to_surface(a, TriangleMesh.empty(), 100)


def test_evaluate_mesh_bundle():
    a = sphere_mesh(1.0, resolution=48)
    m = evaluate_mesh(a, a, 3000, seed=12)
    assert isinstance(m, MeshMetrics)
    assert m.p2s < 1e-9 and m.chamfer < 1e-9 and m.normal_consistency > 0.999
