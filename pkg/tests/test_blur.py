import numpy as np
import pytest

from evdi.blur import blur_average, synth_blur
from evdi.core import DomainError, ExposureWindow, Pose2, Trajectory
from evdi.dataset import VIEW_SHAPE, make_scene, standard_trajectory_text
from evdi import io
from evdi.scene import SceneModel, padding_for, render

from helpers import check_gradient

WINDOW = ExposureWindow(0.1, 0.04)


def small_model(rng, view=(14, 16), pad=6):
    m = SceneModel.create(view, pad)
    m.canvas = rng.uniform(0.1, 0.9, m.canvas.shape)
    return m


def test_identical_frames():
    f = np.random.default_rng(0).random((3, 4, 3))
    assert np.array_equal(blur_average([f] * 5), f)


def test_two_frames():
    assert blur_average([np.zeros((1, 1, 1)), np.ones((1, 1, 1))])[0, 0, 0] == 0.5


@pytest.mark.parametrize("frames", [[], [np.zeros((2, 2, 1)), np.zeros((2, 3, 1))]])
def test_errors(frames):
    with pytest.raises(DomainError):
        blur_average(frames)


def test_static_trajectory_equals_render():
    m = small_model(np.random.default_rng(1))
    p = Pose2(0.05, 1.5, -0.5)
    tr = Trajectory(0, WINDOW, (p,) * 9)
    assert np.allclose(synth_blur(m, tr).image, render(m, p)[0], atol=1e-15)


def test_nine_poses_vs_dense_average_on_standard_scene():
    specs = io.parse_trajectory_spec(standard_trajectory_text())
    dense = [Trajectory.from_endpoints(v, w, a, b, 1000) for v, w, a, b in specs]
    pad = padding_for(dense, VIEW_SHAPE)
    shape = (VIEW_SHAPE[0] + 2 * pad, VIEW_SHAPE[1] + 2 * pad)
    m = SceneModel(make_scene(shape), np.zeros(shape + (1,)), VIEW_SHAPE, pad)
    for tr in dense[:2]:
        oracle = synth_blur(m, tr).image
        nine = synth_blur(m, tr.resampled(9)).image
        assert np.mean(np.abs(nine - oracle)) <= 2e-2


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    m = small_model(rng)
    tr = Trajectory.from_endpoints(0, WINDOW, Pose2(-0.04, -2.3, 1.1), Pose2(0.05, 2.6, -0.9), 9)
    w = rng.standard_normal((14, 16, 3))
    grad = synth_blur(m, tr).backprop(w)
    check_gradient(lambda: float(np.sum(w * synth_blur(m, tr).image)), m.canvas, grad, rng,
                   probes=60, h=1e-4, rel_tol=1e-5)


def test_mean_preservation():
    rng = np.random.default_rng(3)
    m = small_model(rng)
    tr = Trajectory.from_endpoints(0, WINDOW, Pose2(0.0, -2, 0), Pose2(0.1, 2, 1), 9)
    res = synth_blur(m, tr)
    assert res.image.mean() == pytest.approx(np.mean([r.mean() for r in res.renders]), rel=1e-13)


def test_commutes_with_channel_slicing():
    rng = np.random.default_rng(4)
    m = small_model(rng)
    tr = Trajectory.from_endpoints(0, WINDOW, Pose2(0.0, -2, 0), Pose2(0.1, 2, 1), 9)
    sliced = m.copy()
    sliced.canvas = m.canvas[:, :, 1:2].copy()
    assert np.allclose(synth_blur(sliced, tr).image, synth_blur(m, tr).image[:, :, 1:2], atol=1e-15)
