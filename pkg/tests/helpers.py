"""Shared test utilities: a central-difference gradient checker and a small synthetic view."""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from evdi.blur import blur_average
from evdi.core import EventStream, ExposureWindow, Pose2, Trajectory
from evdi.crf import luma
from evdi.edi import edi_multipliers
from evdi.eventsim import FrameSequence, simulate_events
from evdi.scene import SceneModel, padding_for, render

REL_TOL = 1e-4


def check_gradient(f, x: np.ndarray, grad: np.ndarray, rng, probes: int = 50, h: float = 1e-6,
                   rel_tol: float = REL_TOL, min_frac: float = 1e-2):
    """Compare ``grad`` with central differences of scalar ``f`` at ``probes`` entries of ``x``.

    Probes are drawn among entries whose analytic gradient is at least
    ``min_frac`` of the largest one, so the relative test is meaningful.  ``x``
    is perturbed in place and restored.  Returns the worst relative error.
    """
    flat = x.reshape(-1)
    g = np.asarray(grad).reshape(-1)
    big = np.flatnonzero(np.abs(g) >= min_frac * np.abs(g).max())
    assert big.size > 0, "gradient is identically zero"
    picks = rng.choice(big, size=probes, replace=big.size < probes)
    worst = 0.0
    for k in picks:
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        fd = (fp - fm) / (2 * h)
        err = abs(fd - g[k]) / max(abs(fd), abs(g[k]))
        worst = max(worst, err)
        assert err <= rel_tol, f"probe {k}: analytic {g[k]!r} vs finite difference {fd!r} (rel {err:.2e})"
    return worst


def smooth_texture(rng, shape, channels=3, lo=0.15, hi=0.85, blobs=12):
    """Random smooth-plus-edges texture with values inside ``[lo, hi]``."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, channels))
    for c in range(channels):
        base = np.zeros((h, w))
        for _ in range(blobs):
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            s = rng.uniform(2.0, 6.0)
            base += rng.normal() * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s))
        base = (base - base.min()) / (np.ptp(base) + 1e-12)
        img[:, :, c] = lo + (hi - lo) * base
    return img


def make_view(rng, view_shape=(24, 28), p0=Pose2(-0.03, -2.0, -1.0), p1=Pose2(0.03, 2.5, 1.5),
              n_poses=9, frames=48, theta=0.2, tau=0.04, mid=0.1):
    """A ground-truth scene, its trajectory, simulated blur/events and a perturbed model."""
    window = ExposureWindow(mid, tau)
    dense = Trajectory.from_endpoints(0, window, p0, p1, frames)
    pad = padding_for([dense], view_shape)
    shape = (view_shape[0] + 2 * pad, view_shape[1] + 2 * pad)
    gt = SceneModel(smooth_texture(rng, shape), np.zeros(shape + (3,)), view_shape, pad)
    renders = [render(gt, p)[0] for p in dense.poses]
    stream = simulate_events(FrameSequence.uniform([luma(f) for f in renders], window), theta)
    traj = Trajectory.from_endpoints(0, window, p0, p1, n_poses)
    model = gt.copy()
    model.canvas = np.clip(model.canvas + 0.05 * rng.standard_normal(model.canvas.shape), 0.05, 0.95)
    view = SimpleNamespace(traj=traj, stream=stream, gt_blur=blur_average(renders), theta=theta,
                           multipliers=edi_multipliers(stream, window, theta, traj.timesteps),
                           color_targets={}, view_id=0)
    return SimpleNamespace(gt=gt, model=model, view=view, dense=dense, renders=renders, pad=pad,
                           window=window)


def random_us_stream(rng, res=(6, 5), tau_us=100_000, n=None):
    """Events on an integer-microsecond grid over the window [0, tau]."""
    window = ExposureWindow(0.5 * tau_us * 1e-6, tau_us * 1e-6)
    n = int(rng.integers(0, 200)) if n is None else n
    t_us = np.sort(rng.integers(0, tau_us + 1, n))
    s = EventStream(t_us * 1e-6, rng.integers(0, res[0], n), rng.integers(0, res[1], n),
                    rng.choice([-1, 1], n), res, window)
    return s, t_us


def quadrature_weights(stream, t_us, t_ref, theta, samples):
    """Midpoint rule on ``samples`` cells; C(h) counts events stamped at or before h."""
    w, h = stream.resolution
    tau_us = samples  # one cell per microsecond
    pix = stream.y * w + stream.x
    hist = np.zeros((w * h, tau_us + 1))
    np.add.at(hist, (pix, t_us), stream.p)
    cum = np.cumsum(hist, axis=1)           # cum[:, k] = count with t_us <= k
    c_mid = cum[:, :tau_us]                 # at h = k + 0.5 us
    ref_us = t_ref * 1e6
    if t_ref <= stream.window.start:
        c_ref = np.zeros(w * h)
    else:
        c_ref = hist[:, : int(math.floor(ref_us + 1e-9)) + 1].sum(axis=1)
    vals = np.exp(theta * (c_mid - c_ref[:, None]))
    return vals.mean(axis=1).reshape(h, w)
