"""Haar wavelet colour correction and image quality metrics (PSNR, SSIM)."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .core import DomainError, as_image, check_same_shape

# ---------------------------------------------------------------------------
# Haar wavelets


def _haar_step(x: np.ndarray):
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a - b + c - d) * 0.5
    hl = (a + b - c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return ll, (lh, hl, hh)


def _haar_unstep(ll: np.ndarray, details) -> np.ndarray:
    lh, hl, hh = details
    h, w = ll.shape[:2]
    out = np.empty((2 * h, 2 * w) + ll.shape[2:])
    out[0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def haar_decompose(img: np.ndarray, levels: int) -> dict:
    """Orthonormal 2-D Haar pyramid.

    Sides not divisible by ``2**levels`` are reflect-padded; the original shape
    is kept so :func:`haar_reconstruct` can crop back.  ``details[0]`` is the
    finest level.
    """
    if levels < 1:
        raise DomainError("levels must be at least 1")
    img = as_image(img)
    h, w, _ = img.shape
    m = 2 ** levels
    ph, pw = (-h) % m, (-w) % m
    x = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="symmetric") if (ph or pw) else img
    details = []
    for _ in range(levels):
        x, d = _haar_step(x)
        details.append(d)
    return {"approx": x, "details": details, "shape": (h, w)}


def haar_reconstruct(pyramid: dict) -> np.ndarray:
    x = pyramid["approx"]
    for d in reversed(pyramid["details"]):
        x = _haar_unstep(x, d)
    h, w = pyramid["shape"]
    return x[:h, :w]


def color_correct(detail_src: np.ndarray, color_ref: np.ndarray, levels: int = 2) -> np.ndarray:
    """Low-frequency band of ``color_ref`` combined with the detail bands of ``detail_src``."""
    detail_src = as_image(detail_src)
    color_ref = as_image(color_ref)
    check_same_shape(detail_src, color_ref)
    src = haar_decompose(detail_src, levels)
    ref = haar_decompose(color_ref, levels)
    mixed = {"approx": ref["approx"], "details": src["details"], "shape": src["shape"]}
    return np.clip(haar_reconstruct(mixed), 0.0, 1.0)


# ---------------------------------------------------------------------------
# metrics

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = gaussian_kernel()
_RADIUS = SSIM_WINDOW // 2


def _filter_valid(x: np.ndarray) -> np.ndarray:
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = correlate1d(y, _KERNEL, axis=1, mode="constant")
    r = _RADIUS
    return y[r:-r, r:-r]


def _filter_valid_adjoint(g: np.ndarray, shape) -> np.ndarray:
    r = _RADIUS
    full = np.zeros(shape)
    full[r:-r, r:-r] = g
    # a symmetric kernel with zero boundary makes the same-size filter self-adjoint
    y = correlate1d(full, _KERNEL, axis=0, mode="constant")
    return correlate1d(y, _KERNEL, axis=1, mode="constant")


def _ssim_parts(a, b, max_val):
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DomainError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c1 = (SSIM_K1 * max_val) ** 2
    c2 = (SSIM_K2 * max_val) ** 2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a ** 2
    var_b = _filter_valid(b * b) - mu_b ** 2
    cov = _filter_valid(a * b) - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a ** 2 + mu_b ** 2 + c1
    b2 = var_a + var_b + c2
    smap = (a1 * a2) / (b1 * b2)
    return smap, (mu_a, mu_b, a1, a2, b1, b2)


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """Mean SSIM over the valid (unpadded) window positions and all channels."""
    a = as_image(a)
    b = as_image(b)
    check_same_shape(a, b)
    smap, _ = _ssim_parts(a, b, max_val)
    return float(smap.mean())


def ssim_with_grad(a: np.ndarray, b: np.ndarray, max_val: float = 1.0):
    """``(ssim, d ssim / d a, d ssim / d b)``."""
    a = as_image(a)
    b = as_image(b)
    check_same_shape(a, b)
    smap, (mu_a, mu_b, a1, a2, b1, b2) = _ssim_parts(a, b, max_val)
    g = 1.0 / smap.size
    d_cov = g * smap * 2.0 / a2           # wrt E[ab]
    d_var = -g * smap / b2                # wrt E[a^2] and E[b^2]
    d_mu_a = g * smap * (2 * mu_b / a1 - 2 * mu_a / b1) - 2 * mu_a * d_var - mu_b * d_cov
    d_mu_b = g * smap * (2 * mu_a / a1 - 2 * mu_b / b1) - 2 * mu_b * d_var - mu_a * d_cov
    shape = a.shape
    f_var = _filter_valid_adjoint(d_var, shape)
    f_cov = _filter_valid_adjoint(d_cov, shape)
    grad_a = _filter_valid_adjoint(d_mu_a, shape) + 2 * a * f_var + b * f_cov
    grad_b = _filter_valid_adjoint(d_mu_b, shape) + 2 * b * f_var + a * f_cov
    return float(smap.mean()), grad_a, grad_b
