"""Shared domain types: images, events, poses, exposure windows and run configuration.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` holding linear
intensities (float64).  No gamma is ever applied; 8-bit files are mapped by
``/255`` only.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(ValueError):
    """Malformed or unknown configuration."""


class NumericError(FloatingPointError):
    """A loss or parameter became non-finite."""


# ---------------------------------------------------------------------------
# images


def as_image(data, channels: int | None = None) -> np.ndarray:
    """Validate and return ``data`` as a float64 ``(H, W, C)`` image.

    2-D input is promoted to a single channel.  Non-finite values are rejected.
    """
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DomainError(f"image must be 2-D or 3-D, got shape {img.shape}")
    if channels is not None and img.shape[2] != channels:
        raise DomainError(f"expected {channels} channels, got {img.shape[2]}")
    if not np.all(np.isfinite(img)):
        raise DomainError("image contains non-finite values")
    return img


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# time


@dataclass(frozen=True)
class ExposureWindow:
    mid: float
    tau: float

    def __post_init__(self):
        if not (math.isfinite(self.mid) and math.isfinite(self.tau)) or self.tau <= 0:
            raise DomainError(f"invalid exposure window mid={self.mid} tau={self.tau}")

    @property
    def start(self) -> float:
        return self.mid - 0.5 * self.tau

    @property
    def end(self) -> float:
        return self.mid + 0.5 * self.tau

    @property
    def span(self) -> float:
        return self.end - self.start

    def contains(self, t: float) -> bool:
        return self.start <= t <= self.end

    def check(self, t: float, what: str = "t") -> None:
        if not self.contains(t):
            raise DomainError(f"{what}={t!r} outside exposure window [{self.start}, {self.end}]")

    def timesteps(self, n: int) -> np.ndarray:
        """``n`` uniformly spaced timesteps, endpoints included."""
        if n < 2:
            raise DomainError("need at least two timesteps")
        ts = self.start + self.span * np.arange(n) / (n - 1)
        ts[-1] = self.end
        return ts


# ---------------------------------------------------------------------------
# poses


class Pose2(NamedTuple):
    """SE(2) camera pose: rotation ``angle`` (radians) and translation in pixels."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.angle), math.sin(self.angle)
        return Pose2(
            self.angle + other.angle,
            self.tx + c * other.tx - s * other.ty,
            self.ty + s * other.tx + c * other.ty,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.angle), math.sin(self.angle)
        return Pose2(-self.angle, -(c * self.tx + s * self.ty), -(-s * self.tx + c * self.ty))

    def apply(self, x, y):
        """Map points ``(x, y)`` (relative to the view centre) into world offsets."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        return c * x - s * y + self.tx, s * x + c * y + self.ty


def _check_fraction(u: float) -> None:
    if not (0.0 <= u <= 1.0):
        raise DomainError(f"interpolation fraction {u!r} outside [0, 1]")


def pose_lerp(a: Pose2, b: Pose2, u: float) -> Pose2:
    _check_fraction(u)
    if u == 0.0:
        return Pose2(*a)
    if u == 1.0:
        return Pose2(*b)
    return Pose2(
        a.angle + (b.angle - a.angle) * u,
        a.tx + (b.tx - a.tx) * u,
        a.ty + (b.ty - a.ty) * u,
    )


@dataclass(frozen=True)
class QuatPose:
    rotation: tuple  # (w, x, y, z)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise DomainError(f"rotation must be a unit quaternion, got {self.rotation}")
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "QuatPose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        w = math.cos(angle / 2)
        v = axis * math.sin(angle / 2)
        q = np.array([w, *v])
        return cls(tuple(q / np.linalg.norm(q)), translation)


_SLERP_DOT_LIMIT = 1.0 - 1e-6


def quat_slerp(a: QuatPose, b: QuatPose, u: float) -> QuatPose:
    """Constant angular velocity interpolation along the shorter arc.

    Translation is interpolated linearly.  When the quaternions are (anti)parallel
    to within 1e-6 the result falls back to a normalized lerp.
    """
    _check_fraction(u)
    qa = np.asarray(a.rotation)
    qb = np.asarray(b.rotation)
    dot = float(qa @ qb)
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > _SLERP_DOT_LIMIT:
        q = qa + (qb - qa) * u
    else:
        omega = math.acos(min(dot, 1.0))
        so = math.sin(omega)
        q = (math.sin((1 - u) * omega) / so) * qa + (math.sin(u * omega) / so) * qb
    q = q / np.linalg.norm(q)
    ta = np.asarray(a.translation)
    tb = np.asarray(b.translation)
    return QuatPose(tuple(q), tuple(ta + (tb - ta) * u))


@dataclass(frozen=True)
class Trajectory:
    """``n`` poses at timesteps uniformly spanning the exposure window."""

    view_id: int
    window: ExposureWindow
    poses: tuple

    def __post_init__(self):
        if len(self.poses) < 2:
            raise DomainError("trajectory needs at least two poses")
        object.__setattr__(self, "poses", tuple(Pose2(*p) for p in self.poses))

    @classmethod
    def from_endpoints(cls, view_id: int, window: ExposureWindow, p0: Pose2, p1: Pose2,
                       n: int) -> "Trajectory":
        if n < 2:
            raise DomainError("trajectory needs at least two poses")
        return cls(view_id, window, tuple(pose_lerp(p0, p1, j / (n - 1)) for j in range(n)))

    @property
    def n(self) -> int:
        return len(self.poses)

    @cached_property
    def timesteps(self) -> np.ndarray:
        return self.window.timesteps(self.n)

    def resampled(self, n: int) -> "Trajectory":
        """Same motion, sampled at ``n`` uniformly spaced timesteps."""
        ts = self.window.timesteps(n)
        return Trajectory(self.view_id, self.window, tuple(trajectory_pose_at(self, t) for t in ts))


def trajectory_pose_at(traj: Trajectory, t: float) -> Pose2:
    traj.window.check(t)
    ts = traj.timesteps
    j = int(np.searchsorted(ts, t, side="right")) - 1
    j = min(max(j, 0), traj.n - 2)
    if t == ts[j]:
        return traj.poses[j]
    if t == ts[j + 1]:
        return traj.poses[j + 1]
    u = (t - ts[j]) / (ts[j + 1] - ts[j])
    return pose_lerp(traj.poses[j], traj.poses[j + 1], min(max(u, 0.0), 1.0))


# ---------------------------------------------------------------------------
# events


class Event(NamedTuple):
    t: float
    x: int
    y: int
    polarity: int


class EventStream:
    """Time-sorted polarity events of one exposure window.

    Stored column-wise (``t``, ``x``, ``y``, ``p``).  ``C(h)``, the per-pixel
    signed count of events with timestamp ``<= h``, is taken to be zero at the
    instant the window opens, so an event stamped exactly at ``window.start``
    counts as happening just after it.
    """

    def __init__(self, t, x, y, p, resolution: tuple, window: ExposureWindow):
        self.t = np.ascontiguousarray(t, dtype=np.float64)
        self.x = np.ascontiguousarray(x, dtype=np.int64)
        self.y = np.ascontiguousarray(y, dtype=np.int64)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self.window = window
        n = self.t.shape[0]
        if not (self.x.shape == self.y.shape == self.p.shape == (n,)):
            raise DomainError("event columns have mismatched lengths")
        w, h = self.resolution
        if n:
            if not np.all(np.isfinite(self.t)):
                raise DomainError("non-finite event timestamp")
            if np.any(np.diff(self.t) < 0):
                raise DomainError("events must be sorted by time")
            if self.t[0] < window.start or self.t[-1] > window.end:
                raise DomainError("event outside exposure window")
            if self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h:
                raise DomainError("event coordinate out of bounds")
            if not np.all(np.abs(self.p) == 1):
                raise DomainError("polarity must be -1 or +1")
        for arr in (self.t, self.x, self.y, self.p):
            arr.setflags(write=False)

    @classmethod
    def empty(cls, resolution: tuple, window: ExposureWindow) -> "EventStream":
        return cls([], [], [], [], resolution, window)

    @classmethod
    def from_events(cls, events: Sequence[Event], resolution, window) -> "EventStream":
        if not events:
            return cls.empty(resolution, window)
        t, x, y, p = zip(*events)
        return cls(t, x, y, p, resolution, window)

    def __len__(self) -> int:
        return int(self.t.shape[0])

    def __iter__(self):
        for i in range(len(self)):
            yield Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.window == other.window
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @cached_property
    def pixel(self) -> np.ndarray:
        """Flat row-major pixel index of every event."""
        return self.y * self.width + self.x

    @cached_property
    def per_pixel_index(self) -> tuple:
        """``(order, offsets)``: ``order[offsets[k]:offsets[k+1]]`` are pixel ``k``'s events in time order."""
        order = np.lexsort((np.arange(len(self)), self.pixel))
        counts = np.bincount(self.pixel, minlength=self.width * self.height)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return order, offsets

    def events_at(self, x: int, y: int) -> list:
        order, offsets = self.per_pixel_index
        k = y * self.width + x
        return [Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))
                for i in order[offsets[k]:offsets[k + 1]]]

    def count_upto(self, h: float) -> np.ndarray:
        """Per-pixel ``C(h)`` as an ``(H, W)`` integer image."""
        npx = self.width * self.height
        if h <= self.window.start or not len(self):
            return np.zeros((self.height, self.width), dtype=np.int64)
        k = int(np.searchsorted(self.t, h, side="right"))
        c = np.bincount(self.pixel[:k], weights=self.p[:k], minlength=npx)
        return np.rint(c).astype(np.int64).reshape(self.height, self.width)

    def accumulate_image(self, t0: float, t1: float) -> np.ndarray:
        """Signed event count per pixel over ``(t0, t1]`` (negative when ``t1 < t0``)."""
        self.window.check(t0, "t0")
        self.window.check(t1, "t1")
        if t0 == t1:
            return np.zeros((self.height, self.width), dtype=np.int64)
        return self.count_upto(t1) - self.count_upto(t0)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Every tunable of a run.  Unknown keys in a config file are rejected."""

    seed: int = 0
    theta: float = 0.2
    eps_floor: float = 1e-3
    n_poses: int = 9
    # Stage-1 weights
    lambda_blur: float = 1.0
    lambda_ev: float = 0.1
    lambda_edi: float = 1.0
    lambda_rsd: float = 1.0
    lambda1: float = 0.2
    # iterations and warm-ups (fractions of stage-1 iterations)
    iters_stage1: int = 5000
    iters_stage2: int = 500
    crf_warmup: float = 1500 / 100000
    simul_warmup: float = 7000 / 100000
    # learning rates
    lr_canvas: float = 1e-2
    lr_crf: float = 1e-3
    lr_residual: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # CRF
    crf_knots: int = 16
    crf_per_channel: bool = False
    crf_target_grad: bool = True
    # diffusion
    denoiser: str = "zero"
    codec: str = "identity"
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    stage1_t_min: int = 20
    stage1_t_max: int = 980
    stage2_t_max: int = 800
    stage2_t_min: int = 20
    coupled_noise: bool = False
    residual_channels: int = 3
    # post-processing
    wavelet_levels: int = 2
    # bookkeeping
    checkpoint_every: int = 0
    log_every: int = 10
    bayer_weights: tuple = (0.4, 0.2, 0.4)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.theta > 0:
            raise ConfigError("theta must be positive")
        if not self.eps_floor > 0:
            raise ConfigError("eps_floor must be positive")
        if self.n_poses < 2:
            raise ConfigError("n_poses must be at least 2")
        for name in ("lambda_blur", "lambda_ev", "lambda_edi", "lambda_rsd", "lr_canvas",
                     "lr_crf", "lr_residual"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 <= self.lambda1 <= 1:
            raise ConfigError("lambda1 must lie in [0, 1]")
        for name in ("crf_warmup", "simul_warmup"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a fraction in [0, 1]")
        if self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.crf_knots < 2:
            raise ConfigError("crf_knots must be at least 2")
        if self.denoiser not in ("zero", "oracle", "shrinkage"):
            raise ConfigError(f"unknown denoiser {self.denoiser!r}")
        if self.codec not in ("identity", "avgpool"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if not 1 <= self.stage2_t_min <= self.diffusion_steps or not 1 <= self.stage2_t_max <= self.diffusion_steps:
            raise ConfigError("stage-2 timesteps must lie in [1, diffusion_steps]")
        if not 1 <= self.stage1_t_min <= self.stage1_t_max <= self.diffusion_steps:
            raise ConfigError("stage-1 timestep range must lie in [1, diffusion_steps]")
        if self.wavelet_levels < 1:
            raise ConfigError("wavelet_levels must be at least 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in dataclasses.fields(cls)}
