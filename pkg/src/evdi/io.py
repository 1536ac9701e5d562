"""File formats: PNG/PFM images, event files, ``key = value`` configs, trajectory specs."""

from __future__ import annotations

import ast
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (ConfigError, DomainError, EventStream, ExposureWindow, Pose2, RunConfig,
                   Trajectory, as_image)

# ---------------------------------------------------------------------------
# images


def read_png(path) -> np.ndarray:
    """8-bit PNG to linear float in [0, 1] (divided by 255, no gamma)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_image(arr)


def write_png(path, img: np.ndarray) -> None:
    img = as_image(img)
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    if q.shape[2] == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path)
    elif q.shape[2] == 3:
        Image.fromarray(q, mode="RGB").save(path)
    else:
        raise DomainError("PNG output needs 1 or 3 channels")


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM; rows stored bottom-to-top as the format requires."""
    img = as_image(img)
    if img.shape[2] not in (1, 3):
        raise DomainError("PFM holds 1 or 3 channels")
    h, w, c = img.shape
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    data = np.ascontiguousarray(img[::-1].astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise DomainError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        c = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * c)
    return as_image(data.reshape(h, w, c)[::-1].astype(np.float64))


def write_pfm_stack(prefix, img: np.ndarray) -> list:
    """Write an arbitrary-channel image as ``prefix_00.pfm``, ``prefix_01.pfm``, ... (3 channels each)."""
    img = as_image(img)
    paths = []
    for k, c0 in enumerate(range(0, img.shape[2], 3)):
        chunk = img[:, :, c0:c0 + 3]
        if chunk.shape[2] == 2:
            chunk = np.concatenate([chunk, np.zeros_like(chunk[:, :, :1])], axis=2)
        p = Path(f"{prefix}_{k:02d}.pfm")
        write_pfm(p, chunk)
        paths.append(p)
    return paths


def read_pfm_stack(prefix, channels: int) -> np.ndarray:
    parts = []
    k = 0
    while sum(p.shape[2] for p in parts) < channels:
        parts.append(read_pfm(f"{prefix}_{k:02d}.pfm"))
        k += 1
    return np.concatenate(parts, axis=2)[:, :, :channels]


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)


def write_image(path, img) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


# ---------------------------------------------------------------------------
# events

_BIN_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


def _to_us(t: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(t) * 1e6).astype(np.int64)


def write_events_csv(path, stream: EventStream) -> None:
    t_us = _to_us(stream.t)
    with open(path, "w") as fh:
        fh.write("t_us,x,y,p\n")
        for row in zip(t_us.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            fh.write("%d,%d,%d,%d\n" % row)


def _stream_from_columns(t_us, x, y, p, resolution, window) -> EventStream:
    t_us = np.asarray(t_us, dtype=np.int64)
    if t_us.size and np.any(np.diff(t_us) < 0):
        raise DomainError("event file is not sorted by t_us")
    t = t_us.astype(np.float64) * 1e-6
    # microsecond rounding can nudge boundary events just outside the window
    t = np.clip(t, window.start, window.end)
    return EventStream(t, x, y, p, resolution, window)


def read_events_csv(path, resolution, window: ExposureWindow) -> EventStream:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("t_us"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DomainError(f"{path}:{lineno}: expected t_us,x,y,p")
            rows.append([int(v) for v in parts])
    if not rows:
        return EventStream.empty(resolution, window)
    arr = np.array(rows, dtype=np.int64)
    return _stream_from_columns(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], resolution, window)


def write_events_bin(path, stream: EventStream) -> None:
    rec = np.empty(len(stream), dtype=_BIN_RECORD)
    rec["t"] = _to_us(stream.t)
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def read_events_bin(path, resolution, window: ExposureWindow) -> EventStream:
    rec = np.fromfile(path, dtype=_BIN_RECORD)
    return _stream_from_columns(rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"],
                                resolution, window)


def read_events(path, resolution, window) -> EventStream:
    if str(path).endswith(".bin"):
        return read_events_bin(path, resolution, window)
    return read_events_csv(path, resolution, window)


def write_events(path, stream) -> None:
    if str(path).endswith(".bin"):
        write_events_bin(path, stream)
    else:
        write_events_csv(path, stream)


# ---------------------------------------------------------------------------
# config


def _coerce(name: str, typ: str, raw: str):
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "str":
            return raw.strip("\"'")
        if typ == "tuple":
            value = ast.literal_eval(raw)
            return tuple(float(v) for v in value)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    raise ConfigError(f"unsupported config type {typ} for {name}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    types = RunConfig.field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return (base or RunConfig()).replace(**values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if not isinstance(v, str) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# trajectory spec: ``view_id t_mid tau angle0 tx0 ty0 angle1 tx1 ty1``


def parse_trajectory_spec(text: str) -> list:
    """Return ``[(view_id, window, pose_start, pose_end), ...]``."""
    views = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ConfigError(f"trajectory line {lineno}: expected 9 fields, got {len(parts)}")
        try:
            vid = int(parts[0])
            mid, tau, a0, x0, y0, a1, x1, y1 = (float(v) for v in parts[1:])
            window = ExposureWindow(mid, tau)
        except (ValueError, DomainError) as exc:
            raise ConfigError(f"trajectory line {lineno}: {exc}") from exc
        views.append((vid, window, Pose2(a0, x0, y0), Pose2(a1, x1, y1)))
    if not views:
        raise ConfigError("trajectory spec has no views")
    return views


def write_trajectory(path, traj: Trajectory) -> None:
    """Per-view trajectory file: a header line, then ``t angle tx ty`` per pose."""
    with open(path, "w") as fh:
        fh.write(f"# view {traj.view_id} mid {float(traj.window.mid)!r} tau {float(traj.window.tau)!r}\n")
        for t, p in zip(traj.timesteps, traj.poses):
            fh.write(f"{float(t)!r} {float(p.angle)!r} {float(p.tx)!r} {float(p.ty)!r}\n")


def read_trajectory(path) -> Trajectory:
    lines = Path(path).read_text().splitlines()
    head = lines[0].lstrip("#").split()
    if len(head) != 6 or head[0] != "view":
        raise DomainError(f"{path}: malformed trajectory header")
    window = ExposureWindow(float(head[3]), float(head[5]))
    poses = []
    for line in lines[1:]:
        if line.strip():
            _, a, x, y = (float(v) for v in line.split())
            poses.append(Pose2(a, x, y))
    return Trajectory(int(head[1]), window, tuple(poses))


def eprint(*args) -> None:
    print(*args, file=sys.stderr)

