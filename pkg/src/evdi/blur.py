"""Motion blur as the uniform average of sharp renders along a trajectory."""

from __future__ import annotations

import numpy as np

from .core import DomainError, Trajectory, as_image
from .scene import SceneModel, render


def blur_average(frames) -> np.ndarray:
    frames = [as_image(f) for f in frames]
    if not frames:
        raise DomainError("blur_average needs at least one frame")
    shape = frames[0].shape
    # running mean so that identical frames come back bit-exact
    acc = np.zeros(shape)
    for k, f in enumerate(frames, 1):
        if f.shape != shape:
            raise DomainError(f"frame shape {f.shape} differs from {shape}")
        acc += (f - acc) / k
    return acc


class BlurResult:
    """Output of :func:`synth_blur` plus the per-pose renders and footprints for backprop."""

    def __init__(self, image, renders, grads):
        self.image = image
        self.renders = renders
        self.grads = grads

    def backprop(self, grad_out: np.ndarray) -> np.ndarray:
        """Canvas gradient of a loss whose gradient wrt the blurred image is ``grad_out``."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.ndim == 2:
            grad_out = grad_out[:, :, None]
        first = self.grads[0]
        if grad_out.shape[:2] != first.view_shape:
            raise DomainError("gradient shape does not match the blurred image")
        g = grad_out.reshape(-1, grad_out.shape[2])
        acc = first.matrix_t @ g
        for grads in self.grads[1:]:
            acc += grads.matrix_t @ g
        hc, wc = first.canvas_shape
        return (acc / len(self.grads)).reshape(hc, wc, grad_out.shape[2])


def synth_blur(model: SceneModel, traj: Trajectory, which: str = "color") -> BlurResult:
    renders, grads = [], []
    for pose in traj.poses:
        img, g = render(model, pose, which)
        renders.append(img)
        grads.append(g)
    return BlurResult(blur_average(renders), renders, grads)
