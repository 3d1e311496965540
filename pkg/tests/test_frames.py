import numpy as np
import pytest

from volcap.camera import CameraIntrinsics, CameraPose
from volcap.frames import (ColorFrame, DepthFrame, NoiseParams,
                           add_sensor_noise, sample_depth_bilinear)


def make_depth(values, depth_max=10.0):
    h, w = values.shape
    intr = CameraIntrinsics(100.0, 100.0, w / 2, h / 2, w, h)
    return DepthFrame(values, intr, CameraPose.identity(), 0, depth_max)


def test_depth_frame_shape_mismatch():
    intr = CameraIntrinsics(100.0, 100.0, 8.0, 8.0, 16, 16)
    with pytest.raises(ValueError):
        DepthFrame(np.zeros((8, 8)), intr, CameraPose.identity())


def test_color_frame_range_check():
    intr = CameraIntrinsics(100.0, 100.0, 4.0, 4.0, 8, 8)
    with pytest.raises(ValueError):
        ColorFrame(np.full((8, 8, 3), 1.5), intr, CameraPose.identity())


def test_bilinear_exact_grid_point():
    vals = np.full((8, 8), 1.5)
    d, ok = sample_depth_bilinear(make_depth(vals), [3.0, 2.0])
    assert ok and d == pytest.approx(1.5)


def test_bilinear_symmetric_average():
    vals = np.zeros((4, 4))
    vals[1, 1] = 1.0
    vals[1, 2] = 1.0
    vals[2, 1] = 2.0
    vals[2, 2] = 2.0
    d, ok = sample_depth_bilinear(make_depth(vals + (vals == 0) * 5.0), [1.5, 1.5])
    assert ok and d == pytest.approx(1.5)


def test_bilinear_hole_propagates():
    vals = np.full((4, 4), 2.0)
    vals[2, 2] = 0.0
    d, ok = sample_depth_bilinear(make_depth(vals), [1.5, 1.5])
    assert not ok and d == 0.0


def test_bilinear_out_of_bounds_invalid():
    frame = make_depth(np.full((4, 4), 2.0))
    _, ok = sample_depth_bilinear(frame, [-0.5, 1.0])
    assert not ok
    _, ok = sample_depth_bilinear(frame, [3.5, 1.0])
    assert not ok


def test_bilinear_bounded_by_neighbors():
    rng = np.random.default_rng(3)
    vals = rng.uniform(1.0, 3.0, size=(16, 16))
    frame = make_depth(vals)
    pix = rng.uniform(0, 14.999, size=(200, 2))
    depths, ok = sample_depth_bilinear(frame, pix)
    assert ok.all()
    x0 = np.floor(pix[:, 0]).astype(int)
    y0 = np.floor(pix[:, 1]).astype(int)
    four = np.stack([vals[y0, x0], vals[y0, x0 + 1], vals[y0 + 1, x0], vals[y0 + 1, x0 + 1]])
    assert (depths >= four.min(axis=0) - 1e-12).all()
    assert (depths <= four.max(axis=0) + 1e-12).all()


def test_noise_zero_params_is_identity():
    vals = np.full((32, 32), 2.0)
    frame = make_depth(vals)
    out = add_sensor_noise(frame, seed=5, params=NoiseParams.zero())
    assert np.array_equal(out.values, frame.values)


def test_noise_deterministic():
    rng = np.random.default_rng(0)
    vals = rng.uniform(1.0, 3.0, (32, 32))
    frame = make_depth(vals)
    params = NoiseParams()
    a = add_sensor_noise(frame, seed=11, params=params)
    b = add_sensor_noise(frame, seed=11, params=params)
    assert np.array_equal(a.values, b.values)
    c = add_sensor_noise(frame, seed=12, params=params)
    assert not np.array_equal(a.values, c.values)


def test_noise_sigma_monte_carlo():
    # flat 2 m plane: sigma = 1.5mm + 1mm * 4 = 5.5mm
    vals = np.full((400, 400), 2.0)  # 1.6e5 samples
    frame = make_depth(vals)
    params = NoiseParams(sigma_base=0.0015, sigma_quad=0.001, dropout_prob=0.0)
    out = add_sensor_noise(frame, seed=21, params=params)
    measured = out.values.std()
    assert abs(measured - 0.0055) < 0.1 * 0.0055


def test_noise_dropout_only_near_edges():
    vals = np.full((64, 64), 2.0)
    vals[:, 32:] = 1.0  # step edge
    frame = make_depth(vals)
    params = NoiseParams(sigma_base=0.0, sigma_quad=0.0, dropout_prob=1.0,
                         edge_gradient_threshold=0.05)
    out = add_sensor_noise(frame, seed=2, params=params)
    dropped = (out.values == 0) & (frame.values > 0)
    cols = np.unique(np.nonzero(dropped)[1])
    assert dropped.any()
    assert set(cols) <= {31, 32}  # only the discontinuity columns
