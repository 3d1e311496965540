import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from volcap.camera import CameraIntrinsics, CameraPose
from volcap.frames import DepthFrame
from volcap.graph import DeformationGraph, sample_nodes
from volcap.mesh import TriangleMesh
from volcap.scenes import build_scene, ground_truth_mesh, render_scene_views, ring_cameras
from volcap.tracking import (CorrespondenceSet, TrackingEnergyParams,
                             apply_increment, build_normal_equations,
                             depth_normal_map, energy, find_correspondences,
                             pcg_solve, point_to_plane_residuals,
                             solve_gauss_newton)

PARAMS = TrackingEnergyParams()


def plane_frame(depth=2.0, w=96, h=96, focal=110.0):
    intr = CameraIntrinsics(focal, focal, w / 2, h / 2, w, h)
    return DepthFrame(np.full((h, w), depth), intr, CameraPose.identity())


def plane_mesh(z=2.0, half=0.5, n=12):
    xs = np.linspace(-half, half, n)
    xx, yy = np.meshgrid(xs, xs)
    verts = np.stack([xx.reshape(-1), yy.reshape(-1), np.full(n * n, z)], axis=1)
    tris = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            tris.append([a, a + 1, a + n])
            tris.append([a + 1, a + n + 1, a + n])
    normals = np.tile([0.0, 0.0, -1.0], (n * n, 1))
    return TriangleMesh(verts, np.array(tris), normals)


def mesh_graph(mesh, radius=0.15):
    return DeformationGraph(sample_nodes(mesh.vertices, radius), radius)


def test_depth_normal_map_plane():
    nmap = depth_normal_map(plane_frame())
    interior = nmap[1:-1, 1:-1]
    assert np.isfinite(interior).all()
    assert np.abs(interior - np.array([0.0, 0.0, -1.0])).max() < 1e-9


def test_aligned_mesh_full_match_small_residuals():
    frame = plane_frame()
    mesh = plane_mesh()
    graph = mesh_graph(mesh)
    corrs = find_correspondences(mesh, graph, [frame], PARAMS)
    # every interior vertex visible; residuals ~ 0
    assert len(corrs) >= mesh.n_vertices * 0.9
    r = point_to_plane_residuals(graph, corrs)
    assert np.abs(r).max() < 1e-4


def test_occluded_vertex_gets_no_correspondence():
    frame = plane_frame(depth=2.0)
    # a vertex 0.3 m behind the plane: projective lookup lands on the
    # plane, distance 0.3 > dist_reject
    mesh = plane_mesh(z=2.3, half=0.1, n=3)
    graph = mesh_graph(mesh)
    corrs = find_correspondences(mesh, graph, [frame], PARAMS)
    assert len(corrs) == 0


def test_plane_offset_residual_is_offset():
    frame = plane_frame(depth=2.0)
    mesh = plane_mesh(z=1.995, half=0.3)  # 5 mm in front, along the normal
    graph = mesh_graph(mesh)
    corrs = find_correspondences(mesh, graph, [frame], PARAMS)
    assert len(corrs) > 50
    r = np.abs(point_to_plane_residuals(graph, corrs))
    assert np.abs(r - 0.005).max() < 1e-4


def test_energy_zero_for_identity_aligned():
    frame = plane_frame()
    mesh = plane_mesh()
    graph = mesh_graph(mesh)
    corrs = find_correspondences(mesh, graph, [frame], PARAMS)
    e_total, e_data, e_reg = energy(graph, corrs, PARAMS)
    assert e_data < 1e-8
    assert e_reg == pytest.approx(0.0, abs=1e-12)


def test_energy_reg_zero_for_global_rigid():
    rng = np.random.default_rng(0)
    positions = rng.uniform(-0.3, 0.3, (10, 3))
    q = Rotation.from_rotvec([0.2, -0.1, 0.15]).as_matrix()
    b = np.array([0.1, 0.05, -0.07])
    translations = positions @ q.T + b - positions
    graph = DeformationGraph(positions, 0.15, np.tile(q, (10, 1, 1)), translations)
    _, _, e_reg = energy(graph, CorrespondenceSet.empty(), PARAMS)
    assert e_reg < 1e-20


def test_energy_hand_computed_toy():
    # 2 nodes, 1 correspondence, hand-evaluated energies
    positions = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
    translations = np.array([[0.0, 0.0, 0.01], [0.0, 0.0, 0.03]])
    graph = DeformationGraph(positions, 0.1, None, translations)
    v = np.array([[0.05, 0.0, 0.0]])
    p = np.array([[0.05, 0.0, 0.0]])
    pn = np.array([[0.0, 0.0, 1.0]])
    corrs = CorrespondenceSet(np.array([0]), v, p, pn, np.array([0]))
    params = TrackingEnergyParams(lambda_data=1.0, lambda_reg=5.0)

    # both nodes at distance 0.05, equal weights: warp z = (0.01+0.03)/2
    e_total, e_data, e_reg = energy(graph, corrs, params)
    assert e_data == pytest.approx(0.02**2, rel=1e-8)
    # reg: T_0(g_1) - T_1(g_1) = (0,0,0.01-0.03), both directed edges
    assert e_reg == pytest.approx(2 * 0.02**2, rel=1e-8)
    assert e_total == pytest.approx(e_data + 5 * e_reg, rel=1e-10)


def finite_difference_gradient(graph, corrs, params, eps=1e-4):
    n = graph.n_nodes
    grad = np.zeros(6 * n)
    for i in range(6 * n):
        dx = np.zeros(6 * n)
        dx[i] = eps
        ep, _, _ = energy(apply_increment(graph, dx), corrs, params)
        em, _, _ = energy(apply_increment(graph, -dx), corrs, params)
        grad[i] = (ep - em) / (2 * eps)
    return grad


def random_toy_problem(rng, n_nodes=6, n_corr=15):
    positions = rng.uniform(-0.2, 0.2, (n_nodes, 3))
    rotations = Rotation.from_rotvec(rng.uniform(-0.3, 0.3, (n_nodes, 3))).as_matrix()
    translations = rng.uniform(-0.03, 0.03, (n_nodes, 3))
    graph = DeformationGraph(positions, 0.12, rotations, translations)
    v = rng.uniform(-0.2, 0.2, (n_corr, 3))
    p = v + rng.uniform(-0.01, 0.01, (n_corr, 3))
    pn = rng.normal(0, 1, (n_corr, 3))
    pn /= np.linalg.norm(pn, axis=1, keepdims=True)
    corrs = CorrespondenceSet(np.arange(n_corr), v, p, pn,
                              np.zeros(n_corr, dtype=np.int64))
    return graph, corrs


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(3):
        graph, corrs = random_toy_problem(rng)
        a, b = build_normal_equations(graph, corrs, PARAMS)
        # analytic gradient of E is -2 b (b = -J^T r weighted)
        fd = finite_difference_gradient(graph, corrs, PARAMS)
        analytic = -2.0 * b
        denom = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(analytic - fd) / denom < 1e-3


def test_pcg_matches_dense_solve():
    rng = np.random.default_rng(5)
    for _ in range(3):
        graph, corrs = random_toy_problem(rng, n_nodes=12, n_corr=40)
        a, b = build_normal_equations(graph, corrs, PARAMS)
        x_pcg, iters, res = pcg_solve(a, b, tol=1e-10, max_iters=500)
        x_dense = np.linalg.solve(a.toarray(), b)
        denom = max(np.linalg.norm(x_dense), 1e-12)
        assert np.linalg.norm(x_pcg - x_dense) / denom < 1e-5


def test_zero_iterations_returns_graph_unchanged():
    frame = plane_frame()
    mesh = plane_mesh()
    graph = mesh_graph(mesh)
    params = TrackingEnergyParams(max_gn_iters=0)
    result = solve_gauss_newton(graph, [frame], mesh, params)
    assert np.array_equal(result.graph.rotations, graph.rotations)
    assert np.array_equal(result.graph.translations, graph.translations)


def tracked_vertex_error(scene_ref, scene_tgt, translation, radius=0.06):
    mesh = ground_truth_mesh(scene_ref, 0.0, 64)
    graph = DeformationGraph(sample_nodes(mesh.vertices, radius), radius)
    cams = ring_cameras(3, width=256, height_px=256, focal=280.0)
    frames = [df for df, _ in render_scene_views(scene_tgt, 0.0, cams)]
    result = solve_gauss_newton(graph, frames, mesh, TrackingEnergyParams())
    warped, _ = result.graph.warp_points(mesh.vertices)
    target = mesh.vertices + translation
    return np.linalg.norm(warped - target, axis=1), result


def test_rigid_translation_recovery():
    delta = np.array([0.01, 0.0, 0.0])
    scene_ref = build_scene("wrinkled_sphere")
    scene_tgt = build_scene({"kind": "wrinkled_sphere", "center": tuple(delta)})
    err, result = tracked_vertex_error(scene_ref, scene_tgt, delta)
    assert err.mean() < 1e-3
    assert len(result.diagnostics) <= 8


def test_energy_non_increasing_across_accepted_steps():
    delta = np.array([0.008, 0.004, 0.0])
    scene_ref = build_scene("wrinkled_sphere")
    scene_tgt = build_scene({"kind": "wrinkled_sphere", "center": tuple(delta)})
    _, result = tracked_vertex_error(scene_ref, scene_tgt, delta)
    for rec in result.diagnostics:
        assert rec["accepted"]
    # e_total is measured before each step on that iteration's matches;
    # verify the within-iteration acceptance rule held
    assert all(rec["step_scale"] > 0 for rec in result.diagnostics)


def test_bending_capsule_tracking_residual():
    scene = build_scene("bending_capsule")
    mesh = ground_truth_mesh(scene, 0.0, 64)
    graph = DeformationGraph(sample_nodes(mesh.vertices, 0.06), 0.06)
    cams = ring_cameras(3, width=256, height_px=256, focal=280.0)
    frames = [df for df, _ in render_scene_views(scene, 1.0, cams)]
    result = solve_gauss_newton(graph, frames, mesh, TrackingEnergyParams())
    r = np.abs(point_to_plane_residuals(result.graph, result.correspondences))
    assert r.mean() < 0.002
