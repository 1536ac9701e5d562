"""Integrate-and-fire event simulation from a dense sharp frame sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, EventStream, ExposureWindow, as_image


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple
    timestamps: np.ndarray
    window: ExposureWindow

    def __post_init__(self):
        frames = tuple(as_image(f, channels=1) for f in self.frames)
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(frames) < 2:
            raise DomainError("a frame sequence needs at least two frames")
        if ts.shape != (len(frames),):
            raise DomainError("one timestamp per frame required")
        if any(f.shape != frames[0].shape for f in frames):
            raise DomainError("all frames must share one resolution")
        if np.any(np.diff(ts) <= 0):
            raise DomainError("frame timestamps must be strictly increasing")
        if ts[0] < self.window.start or ts[-1] > self.window.end:
            raise DomainError("frame timestamps fall outside the exposure window")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    @classmethod
    def uniform(cls, frames, window: ExposureWindow) -> "FrameSequence":
        """Frames spread uniformly over the whole window, endpoints included."""
        return cls(tuple(frames), window.timesteps(len(frames)), window)

    @property
    def shape(self):
        return self.frames[0].shape

    def reversed(self) -> "FrameSequence":
        """Time-reversed sequence over the same window (t -> start + end - t)."""
        w = self.window
        ts = (w.start + w.end) - self.timestamps[::-1]
        return FrameSequence(self.frames[::-1], np.clip(ts, w.start, w.end), w)


def log_intensity(img: np.ndarray, eps_floor: float) -> np.ndarray:
    return np.log(np.maximum(img, eps_floor))


def simulate_events(seq: FrameSequence, theta: float, eps_floor: float = 1e-3) -> EventStream:
    """Emit an event each time a pixel's log intensity moves ``theta`` away from its reference.

    Each pixel keeps its own reference level, initialised from the first frame.
    Between consecutive frames log intensity is taken to vary linearly, so a
    crossing of ``ref + k*theta`` is time-stamped where that line meets the
    level; the reference then moves by ``theta`` per emitted event.
    """
    if not theta > 0:
        raise DomainError("theta must be positive")
    if not eps_floor > 0:
        raise DomainError("eps_floor must be positive")
    h, w, _ = seq.shape
    logs = [log_intensity(f[:, :, 0], eps_floor).ravel() for f in seq.frames]
    ref = logs[0].copy()
    ts, pix, pol = [], [], []
    for k in range(len(logs) - 1):
        l0, l1 = logs[k], logs[k + 1]
        t0, t1 = seq.timestamps[k], seq.timestamps[k + 1]
        dl = l1 - l0
        for sign in (1, -1):
            n = np.floor(sign * (l1 - ref) / theta)
            idx = np.flatnonzero(n >= 1)
            if idx.size == 0:
                continue
            counts = n[idx].astype(np.int64)
            rep = np.repeat(idx, counts)
            # j = 1..counts for each firing pixel
            j = np.arange(rep.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            level = ref[rep] + sign * theta * j
            frac = (level - l0[rep]) / dl[rep]
            frac = np.clip(frac, 0.0, 1.0)
            ts.append(t0 + (t1 - t0) * frac)
            pix.append(rep)
            pol.append(np.full(rep.size, sign, dtype=np.int8))
            ref[idx] += sign * theta * counts
    if not ts:
        return EventStream.empty((w, h), seq.window)
    t = np.concatenate(ts)
    p_idx = np.concatenate(pix)
    p = np.concatenate(pol)
    x = p_idx % w
    y = p_idx // w
    order = np.lexsort((p, x, y, t))
    return EventStream(t[order], x[order], y[order], p[order], (w, h), seq.window)


def accumulate(stream: EventStream, pixel, t0: float, t1: float) -> int:
    """Signed event count of one pixel over ``(t0, t1]``.

    ``pixel`` is ``(x, y)``.  Multiplying by the threshold approximates the log
    intensity change between ``t0`` and ``t1``.
    """
    x, y = pixel
    if not (0 <= x < stream.width and 0 <= y < stream.height):
        raise DomainError(f"pixel {pixel} out of bounds for {stream.resolution}")
    if t0 > t1:
        raise DomainError("accumulate requires t0 <= t1")
    stream.window.check(t0, "t0")
    stream.window.check(t1, "t1")
    if t0 == t1:
        return 0
    total = 0
    start = stream.window.start
    for ev in stream.events_at(x, y):
        after_t0 = ev.t > t0 or (t0 == start and ev.t == start)
        if after_t0 and ev.t <= t1:
            total += ev.polarity
    return total
