"""DDPM schedule, forward noising, reverse step, the renoised score distillation (RSD)
loss, and Stage-2 latent-residual refinement against pluggable denoisers and codecs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .blur import synth_blur
from .core import ConfigError, DomainError, Pose2, as_image
from .losses import Term
from .scene import SceneModel, backprop_render, render


@dataclass(frozen=True)
class DiffusionSchedule:
    """Tables indexed by step ``t = 0..T``; row 0 is the clean limit (alpha_bar = 1)."""

    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if steps < 1 or not 0 < beta_start <= beta_end < 1:
            raise DomainError("invalid diffusion schedule parameters")
        beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, steps)])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(beta)
        return cls(steps, beta, alpha, alpha_bar, sigma)

    def check(self, t: int, lowest: int = 0) -> int:
        t = int(t)
        if not lowest <= t <= self.steps:
            raise DomainError(f"diffusion step {t} outside [{lowest}, {self.steps}]")
        return t

    def to_csv(self) -> str:
        rows = ["t,beta,alpha,alpha_bar,sigma"]
        for t in range(self.steps + 1):
            vals = (self.beta[t], self.alpha[t], self.alpha_bar[t], self.sigma[t])
            rows.append(f"{t}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(rows) + "\n"


def forward_noise(schedule: DiffusionSchedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    t = schedule.check(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise DomainError("noise and latent shapes differ")
    ab = schedule.alpha_bar[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def reverse_step(schedule: DiffusionSchedule, z_t: np.ndarray, eps_hat: np.ndarray, t: int,
                 noise: np.ndarray | None = None) -> np.ndarray:
    t = schedule.check(t, lowest=1)
    a = schedule.alpha[t]
    ab = schedule.alpha_bar[t]
    out = (np.asarray(z_t) - ((1.0 - a) / math.sqrt(1.0 - ab)) * np.asarray(eps_hat)) / math.sqrt(a)
    if noise is not None and schedule.sigma[t] > 0:
        out = out + schedule.sigma[t] * np.asarray(noise)
    return out


# ---------------------------------------------------------------------------
# denoisers


class ZeroDenoiser:
    def denoise(self, z_t, y, t):
        return np.zeros_like(z_t)


class OracleDenoiser:
    """Test-only: returns the exact noise that maps ``clean`` to ``z_t``."""

    def __init__(self, schedule: DiffusionSchedule, clean: np.ndarray):
        self.schedule = schedule
        self.clean = np.asarray(clean, dtype=np.float64)

    def denoise(self, z_t, y, t):
        ab = self.schedule.alpha_bar[t]
        return (z_t - math.sqrt(ab) * self.clean) / math.sqrt(1.0 - ab)


def _resize_area(img: np.ndarray, shape) -> np.ndarray:
    h, w = shape[:2]
    if img.shape[:2] == (h, w):
        return img
    fy, fx = img.shape[0] // h, img.shape[1] // w
    if fy * h != img.shape[0] or fx * w != img.shape[1]:
        raise DomainError(f"cannot area-resize {img.shape[:2]} to {(h, w)}")
    return img.reshape(h, fy, w, fx, -1).mean(axis=(1, 3))


class ShrinkageDenoiser:
    """Predicts the noise that would make a box-blurred conditioning image the clean latent."""

    def __init__(self, schedule: DiffusionSchedule, size: int = 5):
        self.schedule = schedule
        self.size = size

    def denoise(self, z_t, y, t):
        ab = self.schedule.alpha_bar[t]
        prior = uniform_filter(np.asarray(y, dtype=np.float64), size=(self.size, self.size, 1),
                               mode="reflect")
        prior = _resize_area(prior, z_t.shape)
        return (z_t - math.sqrt(ab) * prior) / math.sqrt(1.0 - ab)


def make_denoiser(name: str, schedule: DiffusionSchedule, clean=None):
    if name == "zero":
        return ZeroDenoiser()
    if name == "shrinkage":
        return ShrinkageDenoiser(schedule)
    if name == "oracle":
        if clean is None:
            raise ConfigError("the oracle denoiser needs the clean latent")
        return OracleDenoiser(schedule, clean)
    raise ConfigError(f"unknown denoiser {name!r}")


# ---------------------------------------------------------------------------
# codecs


class IdentityCodec:
    factor = 1

    def encode(self, img):
        return np.asarray(img, dtype=np.float64)

    def decode(self, z):
        return np.asarray(z, dtype=np.float64)

    def encode_vjp(self, g):
        return np.asarray(g, dtype=np.float64)


def _upsample_bilinear(z: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-centred bilinear upsampling with edge clamping."""
    def axis_weights(n):
        pos = (np.arange(n * factor) + 0.5) / factor - 0.5
        pos = np.clip(pos, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(pos).astype(np.int64), max(n - 2, 0))
        f = pos - i0
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, f

    r0, r1, fr = axis_weights(z.shape[0])
    c0, c1, fc = axis_weights(z.shape[1])
    rows = (1 - fr)[:, None, None] * z[r0] + fr[:, None, None] * z[r1]
    return (1 - fc)[None, :, None] * rows[:, c0] + fc[None, :, None] * rows[:, c1]


class AvgPoolCodec:
    """``factor``x average-pool encoder with a bilinear decoder, mimicking a VAE's downscaling."""

    def __init__(self, factor: int = 4):
        self.factor = factor

    def encode(self, img):
        img = np.asarray(img, dtype=np.float64)
        f = self.factor
        h, w, c = img.shape
        if h % f or w % f:
            raise DomainError(f"image sides must be divisible by {f}")
        return img.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))

    def decode(self, z):
        return _upsample_bilinear(np.asarray(z, dtype=np.float64), self.factor)

    def encode_vjp(self, g):
        f = self.factor
        g = np.asarray(g, dtype=np.float64)
        return np.repeat(np.repeat(g, f, axis=0), f, axis=1) / (f * f)


def make_codec(name: str):
    if name == "identity":
        return IdentityCodec()
    if name == "avgpool":
        return AvgPoolCodec()
    raise ConfigError(f"unknown codec {name!r}")


# ---------------------------------------------------------------------------
# RSD


@dataclass
class RsdResult:
    value: float
    grad: np.ndarray
    z_t: np.ndarray
    z_prev: np.ndarray
    z_prev_hat: np.ndarray


def draw_noises(rng, shape, coupled: bool = False):
    eps = rng.standard_normal(shape)
    eps_prev = eps.copy() if coupled else rng.standard_normal(shape)
    return eps, eps_prev


def rsd_loss(schedule: DiffusionSchedule, z0: np.ndarray, t: int, denoiser, y, rng=None,
             noises: tuple | None = None, coupled: bool = False, grad_mode: str = "target") -> RsdResult:
    """Mean absolute gap between the forward-noised ``z_{t-1}`` and the one-step denoised ``z_t``.

    ``grad_mode="target"`` (default) treats the denoised latent as a fixed
    target so the gradient reaches ``z0`` through ``z_{t-1}`` only.
    ``grad_mode="both"`` also differentiates the ``z_t`` branch with the
    denoiser held constant; the two ``z0`` coefficients then cancel exactly
    (``sqrt(alpha_bar_t) / sqrt(alpha_t) = sqrt(alpha_bar_{t-1})``), so that
    gradient vanishes.
    """
    t = schedule.check(t, lowest=1)
    z0 = np.asarray(z0, dtype=np.float64)
    eps, eps_prev = noises if noises is not None else draw_noises(rng, z0.shape, coupled)
    z_t = forward_noise(schedule, z0, t, eps)
    z_prev = forward_noise(schedule, z0, t - 1, eps_prev)
    eps_hat = denoiser.denoise(z_t, y, t)
    if np.shape(eps_hat) != z_t.shape:
        raise DomainError("denoiser output shape differs from the latent")
    z_prev_hat = reverse_step(schedule, z_t, eps_hat, t)
    d = z_prev - z_prev_hat
    value = float(np.mean(np.abs(d)))
    coef = math.sqrt(schedule.alpha_bar[t - 1])
    if grad_mode == "both":
        coef -= math.sqrt(schedule.alpha_bar[t]) / math.sqrt(schedule.alpha[t])
    elif grad_mode != "target":
        raise DomainError(f"unknown grad_mode {grad_mode!r}")
    grad = coef * np.sign(d) / d.size
    return RsdResult(value, grad, z_t, z_prev, z_prev_hat)


def stage1_rsd_term(model: SceneModel, traj, gt_blur, codec, denoiser, schedule, t: int, rng=None,
                    blur=None, noises=None, coupled: bool = False):
    """RSD on the encoded synthesized blur, conditioned on the captured blurry image."""
    blur = blur or synth_blur(model, traj)
    z0 = codec.encode(blur.image)
    res = rsd_loss(schedule, z0, t, denoiser, as_image(gt_blur), rng=rng, noises=noises,
                   coupled=coupled)
    return Term(res.value, blur.backprop(codec.encode_vjp(res.grad)))


def refined_latent(model: SceneModel, pose: Pose2, codec):
    """``(z0', color render, residual render, residual footprint)`` with ``z0' = E(C) + f_2D``."""
    color, _ = render(model, pose, "color")
    feat, grads = render(model, pose, "residual")
    z0 = codec.encode(color)
    f2d = codec.encode(feat)
    if f2d.shape != z0.shape:
        raise DomainError(f"residual latent {f2d.shape} does not match image latent {z0.shape}")
    return z0 + f2d, color, feat, grads


def stage2_step(model: SceneModel, pose: Pose2, codec, denoiser, schedule, t: int, rng=None,
                noises=None, coupled: bool = False):
    """RSD on the refined latent, conditioned on the colour render.

    Returns ``(value, residual_gradient)``; nothing else receives a gradient.
    """
    z0, color, _, grads = refined_latent(model, pose, codec)
    res = rsd_loss(schedule, z0, t, denoiser, color, rng=rng, noises=noises, coupled=coupled)
    return res.value, backprop_render(codec.encode_vjp(res.grad), grads)


def refine_render(model: SceneModel, pose: Pose2, codec) -> np.ndarray:
    """Decode the refined latent: ``D(f_2D + E(render))``."""
    z0, _, _, _ = refined_latent(model, pose, codec)
    return codec.decode(z0)


def stage2_timestep(iteration: int, total: int, t_max: int, t_min: int, steps: int = 1000) -> int:
    """Linearly decreasing timestep from ``t_max`` (iteration 0) to ``t_min`` (``total``)."""
    frac = iteration / total if total > 0 else 1.0
    t = math.floor(t_max + (t_min - t_max) * frac + 0.5)
    return int(min(max(t, 1), steps))
