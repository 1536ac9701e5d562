"""Differentiable 2-D canvas scene rendered under SE(2) poses.

A view pixel ``(x, y)`` maps to canvas coordinate
``R(angle) @ (x - cx, y - cy) + (cx + pad + tx, cy + pad + ty)`` where
``(cx, cy)`` is the view centre, and the canvas is sampled bilinearly with
clamp-to-edge.  The identity pose therefore renders the central crop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .core import DomainError, Pose2, Trajectory, as_image


@dataclass(frozen=True)
class RenderGrad:
    """Bilinear footprint of one render: four canvas taps and weights per output pixel."""

    index: np.ndarray   # (H*W, 4) flat canvas texel index
    weight: np.ndarray  # (H*W, 4)
    view_shape: tuple   # (H, W)
    canvas_shape: tuple  # (Hc, Wc)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """Sampling operator as a sparse ``(H*W, Hc*Wc)`` matrix."""
        npx = self.index.shape[0]
        rows = np.repeat(np.arange(npx), self.index.shape[1])
        return sparse.csr_matrix((self.weight.ravel(), (rows, self.index.ravel())),
                                 shape=(npx, self.canvas_shape[0] * self.canvas_shape[1]))

    @cached_property
    def matrix_t(self) -> sparse.csr_matrix:
        return self.matrix.T.tocsr()


@dataclass
class SceneModel:
    canvas: np.ndarray
    residual: np.ndarray
    view_shape: tuple
    pad: int
    _footprints: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.canvas = as_image(self.canvas)
        self.residual = as_image(self.residual)
        h, w = self.view_shape
        expect = (h + 2 * self.pad, w + 2 * self.pad)
        if self.canvas.shape[:2] != expect or self.residual.shape[:2] != expect:
            raise DomainError(f"canvas must be {expect} for view {self.view_shape} and pad {self.pad}")

    @classmethod
    def create(cls, view_shape, pad: int, channels: int = 3, residual_channels: int = 3,
               fill: float = 0.5) -> "SceneModel":
        h, w = view_shape
        shape = (h + 2 * pad, w + 2 * pad)
        return cls(np.full(shape + (channels,), float(fill)), np.zeros(shape + (residual_channels,)),
                   tuple(view_shape), int(pad))

    @property
    def canvas_shape(self) -> tuple:
        return self.canvas.shape[:2]

    def copy(self) -> "SceneModel":
        return SceneModel(self.canvas.copy(), self.residual.copy(), self.view_shape, self.pad)

    def footprint(self, pose: Pose2) -> RenderGrad:
        pose = Pose2(*pose)
        fp = self._footprints.get(pose)
        if fp is None:
            fp = bilinear_footprint(pose, self.view_shape, self.pad, self.canvas_shape)
            if len(self._footprints) < 512:
                self._footprints[pose] = fp
        return fp


def view_coordinates(pose: Pose2, view_shape, pad: int):
    """Canvas sampling coordinates ``(X, Y)`` of every view pixel, each ``(H, W)``."""
    h, w = view_shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(pose.angle), math.sin(pose.angle)
    dx, dy = xs - cx, ys - cy
    X = c * dx - s * dy + cx + pad + pose.tx
    Y = s * dx + c * dy + cy + pad + pose.ty
    return X, Y


def bilinear_footprint(pose: Pose2, view_shape, pad: int, canvas_shape) -> RenderGrad:
    hc, wc = canvas_shape
    X, Y = view_coordinates(pose, view_shape, pad)
    X = np.clip(X.ravel(), 0.0, wc - 1.0)
    Y = np.clip(Y.ravel(), 0.0, hc - 1.0)
    x0 = np.minimum(np.floor(X), wc - 2).astype(np.int64)
    y0 = np.minimum(np.floor(Y), hc - 2).astype(np.int64)
    fx = X - x0
    fy = Y - y0
    base = y0 * wc + x0
    index = np.stack([base, base + 1, base + wc, base + wc + 1], axis=1)
    weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return RenderGrad(index, weight, tuple(view_shape), (hc, wc))


def sample(texture: np.ndarray, grads: RenderGrad) -> np.ndarray:
    flat = texture.reshape(-1, texture.shape[2])
    out = grads.matrix @ flat
    return out.reshape(grads.view_shape + (texture.shape[2],))


def render(model: SceneModel, pose: Pose2, which: str = "color"):
    """Render ``model`` at ``pose``; returns ``(image, RenderGrad)``.

    ``which`` selects the colour canvas or the residual feature canvas; both go
    through the identical sampling path.
    """
    if which == "color":
        texture = model.canvas
    elif which == "residual":
        texture = model.residual
    else:
        raise DomainError(f"unknown render target {which!r}")
    grads = model.footprint(pose)
    return sample(texture, grads), grads


def backprop_render(grad_out: np.ndarray, grads: RenderGrad) -> np.ndarray:
    """Scatter-add ``grad_out * weight`` into a canvas-shaped gradient (transpose of ``sample``)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 2:
        grad_out = grad_out[:, :, None]
    if grad_out.shape[:2] != grads.view_shape:
        raise DomainError(f"gradient shape {grad_out.shape[:2]} does not match render {grads.view_shape}")
    hc, wc = grads.canvas_shape
    g = grad_out.reshape(-1, grad_out.shape[2])
    return (grads.matrix_t @ g).reshape(hc, wc, grad_out.shape[2])


def max_displacement(trajectories, view_shape) -> float:
    """Largest distance any view corner moves from its identity-pose position."""
    h, w = view_shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    corners = np.array([[-cx, -cy], [cx, -cy], [-cx, cy], [cx, cy]])
    best = 0.0
    for traj in trajectories:
        poses = traj.poses if isinstance(traj, Trajectory) else traj
        for p in poses:
            X, Y = Pose2(*p).apply(corners[:, 0], corners[:, 1])
            d = np.hypot(X - corners[:, 0], Y - corners[:, 1]).max()
            best = max(best, float(d))
    return best


def padding_for(trajectories, view_shape) -> int:
    return int(math.ceil(max_displacement(trajectories, view_shape))) + 2


def back_warp(image: np.ndarray, pose: Pose2, view_shape, pad: int) -> np.ndarray:
    """Spread a view image over the full canvas by inverting ``pose`` (clamp-to-edge outside)."""
    image = as_image(image)
    h, w = view_shape
    hc, wc = h + 2 * pad, w + 2 * pad
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:hc, 0:wc].astype(np.float64)
    c, s = math.cos(pose.angle), math.sin(pose.angle)
    ux = xs - (cx + pad + pose.tx)
    uy = ys - (cy + pad + pose.ty)
    vx = c * ux + s * uy + cx
    vy = -s * ux + c * uy + cy
    vx = np.clip(vx.ravel(), 0.0, w - 1.0)
    vy = np.clip(vy.ravel(), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(vx), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(vy), h - 2).astype(np.int64)
    fx, fy = (vx - x0)[:, None], (vy - y0)[:, None]
    flat = image.reshape(-1, image.shape[2])
    b = y0 * w + x0
    out = ((1 - fx) * (1 - fy) * flat[b] + fx * (1 - fy) * flat[b + 1]
           + (1 - fx) * fy * flat[b + w] + fx * fy * flat[b + w + 1])
    return out.reshape(hc, wc, image.shape[2])
