"""Event Double Integral: blurry image + events -> latent sharp image, and latent warping."""

from __future__ import annotations

import logging

import numpy as np

from .core import DomainError, EventStream, ExposureWindow, as_image, check_same_shape

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-6


def edi_weights(stream: EventStream, window: ExposureWindow, theta: float,
                t_ref: float) -> np.ndarray:
    """Per-pixel ``(1/tau) * integral of exp(theta * E(h)) dh`` over the window.

    ``E(h) = C(h) - C(t_ref)`` where ``C`` is the cumulative signed count, so
    the integrand is piecewise constant between event timestamps and the
    integral is summed exactly interval by interval.  Returns an ``(H, W, 1)``
    image; event-free pixels get exactly 1.
    """
    if not window.span > 0:
        raise DomainError("empty exposure window")
    window.check(t_ref, "t_ref")
    w, h = stream.resolution
    npx = w * h
    span = window.span
    weights = np.ones(npx)
    if len(stream):
        order, offsets = stream.per_pixel_index
        pix = stream.pixel[order]
        t = np.clip(stream.t[order], window.start, window.end)
        p = stream.p[order].astype(np.float64)
        # running count within each pixel group
        csum = np.cumsum(p)
        c_after = csum - np.concatenate([[0.0], csum])[offsets[pix]]
        # interval after each event runs to the next event of the same pixel or window end
        nxt = np.empty_like(t)
        nxt[:-1] = t[1:]
        last = np.ones(t.shape, dtype=bool)
        last[:-1] = pix[1:] != pix[:-1]
        nxt[last] = window.end
        c_ref = stream.count_upto(t_ref).ravel().astype(np.float64)
        cr = c_ref[pix]
        contrib = np.exp(theta * (c_after - cr)) * (nxt - t)
        has = np.diff(offsets) > 0
        first_t = np.full(npx, window.end)
        first_t[has] = t[offsets[:-1][has]]
        integral = np.bincount(pix, weights=contrib, minlength=npx)
        integral += np.exp(-theta * c_ref) * (first_t - window.start)
        weights[has] = integral[has] / span
    weights = weights.reshape(h, w, 1)
    if np.any(weights < WEIGHT_FLOOR):
        log.warning("clamping %d EDI weights below %g", int(np.sum(weights < WEIGHT_FLOOR)),
                    WEIGHT_FLOOR)
        weights = np.maximum(weights, WEIGHT_FLOOR)
    return weights


def edi_deblur(blurry: np.ndarray, weights: np.ndarray) -> np.ndarray:
    blurry = as_image(blurry, channels=1)
    weights = as_image(weights, channels=1)
    check_same_shape(blurry, weights)
    if np.any(weights <= 0):
        raise DomainError("EDI weights must be positive")
    return blurry / weights


def edi_deblur_color(blurry: np.ndarray, stream: EventStream, window: ExposureWindow,
                     theta: float, t_ref: float) -> np.ndarray:
    """Channel-wise EDI with one shared weight map."""
    blurry = as_image(blurry)
    weights = edi_weights(stream, window, theta, t_ref)
    return np.concatenate([edi_deblur(blurry[:, :, c:c + 1], weights)
                           for c in range(blurry.shape[2])], axis=2)


def warp_factor(stream: EventStream, theta: float, t_from: float, t_to: float) -> np.ndarray:
    """``exp(theta * accumulate(t_from, t_to))`` per pixel, ``(H, W, 1)``."""
    count = stream.accumulate_image(t_from, t_to)
    return np.exp(theta * count.astype(np.float64))[:, :, None]


def warp_latent(latent: np.ndarray, stream: EventStream, theta: float, t_from: float,
                t_to: float) -> np.ndarray:
    latent = as_image(latent)
    if latent.shape[:2] != (stream.height, stream.width):
        raise DomainError("latent and event stream resolutions differ")
    if t_from == t_to:
        stream.window.check(t_from, "t_from")
        return latent.copy()
    return latent * warp_factor(stream, theta, t_from, t_to)


def edi_multipliers(stream: EventStream, window: ExposureWindow, theta: float,
                    timesteps) -> list:
    """Per-pixel factors ``m_i`` such that the EDI target at ``t_i`` equals ``blurry * m_i``.

    EDI is linear in the blurry image, so these are all a caller needs to
    differentiate targets built from a learnable blurry estimate.
    """
    for t in timesteps:
        window.check(t, "timestep")
    weights = edi_weights(stream, window, theta, window.mid)
    return [warp_factor(stream, theta, window.mid, t) / weights for t in timesteps]


def edi_targets(blurry_brightness: np.ndarray, stream: EventStream, window: ExposureWindow,
                theta: float, timesteps) -> list:
    """Deblur at mid-exposure, then warp the latent to each requested timestep."""
    blurry = as_image(blurry_brightness)
    return [blurry * m for m in edi_multipliers(stream, window, theta, timesteps)]
