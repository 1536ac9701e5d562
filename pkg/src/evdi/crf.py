"""Learnable camera response (monotone piecewise-linear tone curve) and BT.601 luma."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, as_image

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class CrfParams:
    """Unconstrained knot logits, shape ``(K,)`` (shared) or ``(C, K)`` (per channel).

    The curve's segment increments are ``softmax(logits)``, so it is strictly
    increasing with ``CRF(0) = 0`` and ``CRF(1) = 1`` for any logits; zero
    logits give the identity.
    """

    logits: np.ndarray

    @classmethod
    def identity(cls, knots: int = 16, channels: int | None = None) -> "CrfParams":
        shape = (knots,) if channels is None else (channels, knots)
        return cls(np.zeros(shape))

    @property
    def knots(self) -> int:
        return self.logits.shape[-1]

    @property
    def per_channel(self) -> bool:
        return self.logits.ndim == 2

    def copy(self) -> "CrfParams":
        return CrfParams(self.logits.copy())

    def increments(self) -> np.ndarray:
        a = np.atleast_2d(self.logits)
        e = np.exp(a - a.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def knot_values(self) -> np.ndarray:
        """``(rows, K+1)`` curve values at ``x = k/K`` with exact endpoints."""
        w = self.increments()
        y = np.zeros((w.shape[0], w.shape[1] + 1))
        y[:, 1:] = np.cumsum(w, axis=1)
        y[:, -1] = 1.0
        return y

    def curve(self, samples: int = 256) -> tuple:
        x = np.linspace(0.0, 1.0, samples)
        img = np.repeat(x[:, None, None], self.logits.shape[0] if self.per_channel else 1, axis=2)
        out, _ = crf_apply(self, img)
        return x, out[:, 0, :]


class CrfCache:
    def __init__(self, params, seg, frac, inside, slope, channels):
        self.params = params
        self.seg = seg
        self.frac = frac
        self.inside = inside
        self.slope = slope
        self.channels = channels

    def backprop(self, grad_out: np.ndarray):
        """Return ``(grad_logits, grad_input)``."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        grad_in = grad_out * self.slope * self.inside
        w = self.params.increments()
        k = self.params.knots
        g_w = np.zeros_like(w)
        for c in range(self.channels):
            row = c if self.params.per_channel else 0
            seg = self.seg[:, :, c].ravel()
            g = grad_out[:, :, c].ravel()
            # d out / d w_j = [j < seg] + frac * [j == seg]
            at_seg = np.bincount(seg, weights=g * self.frac[:, :, c].ravel(), minlength=k)
            per_seg = np.bincount(seg, weights=g, minlength=k)
            # [j < seg]: sum of g over pixels whose segment index exceeds j
            below = np.concatenate([np.cumsum(per_seg[::-1])[::-1][1:], [0.0]])
            g_w[row] += below + at_seg
        g_logits = w * (g_w - np.sum(g_w * w, axis=1, keepdims=True))
        return g_logits.reshape(self.params.logits.shape), grad_in


def crf_apply(params: CrfParams, img: np.ndarray):
    """Map ``img`` (clamped to [0, 1]) through the curve; returns ``(out, CrfCache)``."""
    img = as_image(img)
    h, w, c = img.shape
    if params.per_channel and params.logits.shape[0] != c:
        raise DomainError(f"per-channel CRF has {params.logits.shape[0]} rows for {c} channels")
    k = params.knots
    y = params.knot_values()
    x = np.clip(img, 0.0, 1.0)
    inside = ((img >= 0.0) & (img <= 1.0)).astype(np.float64)
    pos = x * k
    seg = np.minimum(np.floor(pos), k - 1).astype(np.int64)
    frac = pos - seg
    rows = np.arange(c) if params.per_channel else np.zeros(c, dtype=np.int64)
    rows = np.broadcast_to(rows, img.shape)
    y0 = y[rows, seg]
    y1 = y[rows, seg + 1]
    out = (1.0 - frac) * y0 + frac * y1
    slope = (y1 - y0) * k
    return out, CrfCache(params, seg, frac, inside, slope, c)


def luma(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] != 3:
        raise DomainError(f"luma needs 3 channels, got {img.shape[2]}")
    return (img @ LUMA_WEIGHTS)[:, :, None]


def luma_backprop(grad_out: np.ndarray) -> np.ndarray:
    return np.asarray(grad_out)[:, :, :1] * LUMA_WEIGHTS


class BrightnessCache:
    def __init__(self, crf_cache, y, eps_floor):
        self.crf_cache = crf_cache
        self.y = y
        self.eps_floor = eps_floor

    def backprop_luma(self, grad_y: np.ndarray):
        """Backprop a gradient wrt the luma ``h(CRF(img))`` to ``(grad_logits, grad_img)``."""
        return self.crf_cache.backprop(luma_backprop(grad_y))

    def backprop(self, grad_out: np.ndarray):
        """Backprop a gradient wrt the log brightness."""
        active = self.y > self.eps_floor
        grad_y = np.where(active, grad_out / np.where(active, self.y, 1.0), 0.0)
        return self.backprop_luma(grad_y)


def brightness(params: CrfParams, img: np.ndarray, eps_floor: float = 1e-3):
    """``h(CRF(img))`` with a cache whose ``backprop_luma`` differentiates it."""
    mapped, cache = crf_apply(params, img)
    y = luma(mapped)
    return y, BrightnessCache(cache, y, eps_floor)


def log_brightness(params: CrfParams, img: np.ndarray, eps_floor: float = 1e-3):
    """``log(max(h(CRF(img)), eps_floor))``; zero gradient where the floor is active."""
    y, cache = brightness(params, img, eps_floor)
    return np.log(np.maximum(y, eps_floor)), cache
