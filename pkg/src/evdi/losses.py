"""Stage-1 objective terms with analytic gradients to the canvas and the CRF logits.

Each term returns a :class:`Term` carrying its value and the gradient of that
value (unweighted) with respect to the colour canvas and the CRF logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blur import BlurResult, synth_blur
from .core import RunConfig, Trajectory, as_image, check_same_shape, trajectory_pose_at
from .crf import CrfParams, brightness, log_brightness
from .edi import edi_multipliers
from .postprocess import ssim_with_grad
from .scene import SceneModel, backprop_render, render

TERMS = ("blur", "ev", "edi_gray", "edi_color", "edi_simul", "rsd")


@dataclass
class Term:
    value: float
    canvas: np.ndarray | None = None
    crf: np.ndarray | None = None


def photometric(a: np.ndarray, b: np.ndarray, lambda1: float = 0.2):
    """``(1 - l1) * mean|a - b| + l1 * (1 - SSIM(a, b)) / 2``.

    Returns ``(value, grad_a, grad_b)``.
    """
    a = as_image(a)
    b = as_image(b)
    check_same_shape(a, b)
    diff = b - a
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    value = (1.0 - lambda1) * l1
    grad_b = (1.0 - lambda1) * g_l1
    grad_a = -grad_b
    if lambda1 > 0:
        s, gs_a, gs_b = ssim_with_grad(a, b)
        value += lambda1 * (1.0 - s) / 2.0
        grad_a = grad_a - 0.5 * lambda1 * gs_a
        grad_b = grad_b - 0.5 * lambda1 * gs_b
    return value, grad_a, grad_b


def _multipliers(traj, stream, theta, multipliers):
    if multipliers is None:
        multipliers = edi_multipliers(stream, traj.window, theta, traj.timesteps)
    return multipliers


def _pick_index(traj, rng, index):
    if index is None:
        index = int(rng.integers(traj.n))
    return index


def loss_blur(model: SceneModel, traj: Trajectory, gt_blur: np.ndarray, lambda1: float = 0.2,
              blur: BlurResult | None = None) -> Term:
    blur = blur or synth_blur(model, traj)
    value, _, g = photometric(gt_blur, blur.image, lambda1)
    return Term(value, blur.backprop(g))


def sample_event_interval(window, rng) -> tuple:
    """``t_alpha`` uniform in the window, ``dt`` uniform in ``(0, tau/2]``, ``t_beta`` clipped."""
    t_alpha = window.start + window.span * rng.random()
    dt = 0.5 * window.tau * (1.0 - rng.random())
    return t_alpha, min(t_alpha + dt, window.end)


def loss_ev(model: SceneModel, crf: CrfParams, traj: Trajectory, stream, theta: float,
            rng=None, times: tuple | None = None, eps_floor: float = 1e-3) -> Term:
    """Squared error between rendered and event-measured log brightness change."""
    t_alpha, t_beta = times if times is not None else sample_event_interval(traj.window, rng)
    img_a, grads_a = render(model, trajectory_pose_at(traj, t_alpha))
    img_b, grads_b = render(model, trajectory_pose_at(traj, t_beta))
    la, cache_a = log_brightness(crf, img_a, eps_floor)
    lb, cache_b = log_brightness(crf, img_b, eps_floor)
    measured = theta * stream.accumulate_image(t_alpha, t_beta).astype(np.float64)[:, :, None]
    r = (lb - la) - measured
    value = float(np.mean(r ** 2))
    g = 2.0 * r / r.size
    crf_b, img_gb = cache_b.backprop(g)
    crf_a, img_ga = cache_a.backprop(-g)
    canvas = backprop_render(img_gb, grads_b) + backprop_render(img_ga, grads_a)
    return Term(value, canvas, crf_a + crf_b)


def loss_edi_gray(model: SceneModel, crf: CrfParams, traj: Trajectory, stream, theta: float,
                  gt_blur: np.ndarray, rng=None, index: int | None = None, multipliers=None,
                  lambda1: float = 0.2, target_grad: bool = True) -> Term:
    """Photometric error between the EDI brightness target and ``h(CRF(render))`` at ``t_i``."""
    j = _pick_index(traj, rng, index)
    m = _multipliers(traj, stream, theta, multipliers)[j]
    blurry_y, cache_t = brightness(crf, gt_blur)
    target = blurry_y * m
    img, grads = render(model, traj.poses[j])
    pred, cache_p = brightness(crf, img)
    value, g_t, g_p = photometric(target, pred, lambda1)
    crf_g, img_g = cache_p.backprop_luma(g_p)
    if target_grad:
        crf_t, _ = cache_t.backprop_luma(g_t * m)
        crf_g = crf_g + crf_t
    return Term(value, backprop_render(img_g, grads), crf_g)


def loss_edi_color(model: SceneModel, traj: Trajectory, stream, theta: float, gt_blur: np.ndarray,
                   rng=None, index: int | None = None, multipliers=None, lambda1: float = 0.2,
                   targets: dict | None = None) -> Term:
    """Photometric error against channel-wise EDI colour targets.

    ``targets`` (keyed by pose index) caches the targets, which no learnable
    parameter touches.
    """
    j = _pick_index(traj, rng, index)
    target = None if targets is None else targets.get(j)
    if target is None:
        m = _multipliers(traj, stream, theta, multipliers)[j]
        target = as_image(gt_blur) * m
        if targets is not None:
            targets[j] = target
    img, grads = render(model, traj.poses[j])
    value, _, g_p = photometric(target, img, lambda1)
    return Term(value, backprop_render(g_p, grads))


def loss_edi_simul(model: SceneModel, crf: CrfParams, traj: Trajectory, stream, theta: float,
                   rng=None, index: int | None = None, multipliers=None, lambda1: float = 0.2,
                   blur: BlurResult | None = None, target_grad: bool = True) -> Term:
    """As :func:`loss_edi_gray` but the EDI target is built from the synthesized blur."""
    j = _pick_index(traj, rng, index)
    m = _multipliers(traj, stream, theta, multipliers)[j]
    blur = blur or synth_blur(model, traj)
    blurry_y, cache_t = brightness(crf, blur.image)
    target = blurry_y * m
    img, grads = render(model, traj.poses[j])
    pred, cache_p = brightness(crf, img)
    value, g_t, g_p = photometric(target, pred, lambda1)
    crf_g, img_g = cache_p.backprop_luma(g_p)
    canvas = backprop_render(img_g, grads)
    if target_grad:
        crf_t, blur_g = cache_t.backprop_luma(g_t * m)
        crf_g = crf_g + crf_t
        canvas = canvas + blur.backprop(blur_g)
    return Term(value, canvas, crf_g)


@dataclass
class Gates:
    """Warm-up switches: before activation the CRF is frozen and the simul term is off."""

    crf: bool = True
    simul: bool = True

    @classmethod
    def at(cls, iteration: int, total: int, cfg: RunConfig) -> "Gates":
        return cls(crf=iteration >= cfg.crf_warmup * total, simul=iteration >= cfg.simul_warmup * total)


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: float
    canvas: np.ndarray
    crf: np.ndarray
    index: int = -1
    times: tuple = ()
    extra: dict = field(default_factory=dict)


def term_weights(cfg: RunConfig) -> dict:
    return {
        "blur": cfg.lambda_blur,
        "ev": cfg.lambda_ev,
        "edi_gray": cfg.lambda_edi,
        "edi_color": cfg.lambda_edi,
        "edi_simul": cfg.lambda_edi,
        "rsd": cfg.lambda_rsd,
    }


def loss_stage1(model: SceneModel, crf: CrfParams, view, cfg: RunConfig, gates: Gates, rng,
                rsd=None) -> LossReport:
    """Weighted Stage-1 objective for one view.

    ``view`` supplies ``traj``, ``stream``, ``gt_blur``, ``multipliers`` and
    ``color_targets``.  ``rsd``, when given, is a callable
    ``(model, view, blur, rng) -> Term``; it is skipped when its weight is 0.
    Random draws happen in a fixed order: pose index, event interval, then the
    diffusion term.
    """
    traj = view.traj
    j = int(rng.integers(traj.n))
    times = sample_event_interval(traj.window, rng)
    weights = term_weights(cfg)
    blur = synth_blur(model, traj)
    lam1 = cfg.lambda1
    terms = {
        "blur": loss_blur(model, traj, view.gt_blur, lam1, blur=blur),
        "ev": loss_ev(model, crf, traj, view.stream, cfg.theta, times=times, eps_floor=cfg.eps_floor),
        "edi_gray": loss_edi_gray(model, crf, traj, view.stream, cfg.theta, view.gt_blur, index=j,
                                  multipliers=view.multipliers, lambda1=lam1,
                                  target_grad=cfg.crf_target_grad),
        "edi_color": loss_edi_color(model, traj, view.stream, cfg.theta, view.gt_blur, index=j,
                                    multipliers=view.multipliers, lambda1=lam1,
                                    targets=view.color_targets),
    }
    if gates.simul:
        terms["edi_simul"] = loss_edi_simul(model, crf, traj, view.stream, cfg.theta, index=j,
                                            multipliers=view.multipliers, lambda1=lam1, blur=blur,
                                            target_grad=cfg.crf_target_grad)
    else:
        terms["edi_simul"] = Term(0.0)
    if rsd is not None and weights["rsd"] > 0:
        terms["rsd"] = rsd(model, view, blur, rng)
    else:
        terms["rsd"] = Term(0.0)

    canvas = np.zeros_like(model.canvas)
    crf_grad = np.zeros_like(crf.logits)
    total = 0.0
    for name in TERMS:
        term = terms[name]
        w = weights[name]
        total += w * term.value
        if w == 0:
            continue
        if term.canvas is not None:
            canvas += w * term.canvas
        if term.crf is not None:
            crf_grad += w * term.crf
    if not gates.crf:
        crf_grad[...] = 0.0
    return LossReport({k: t.value for k, t in terms.items()}, weights, total, canvas, crf_grad,
                      index=j, times=times)
