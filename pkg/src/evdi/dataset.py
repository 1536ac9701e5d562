"""Synthetic multi-view dataset: the standard scene, dataset generation and loading."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .blur import blur_average
from .core import (ConfigError, DomainError, EventStream, ExposureWindow, Pose2, RunConfig,
                   Trajectory, trajectory_pose_at)
from .crf import luma
from .edi import edi_multipliers
from .eventsim import FrameSequence, simulate_events
from . import io
from .scene import SceneModel, padding_for, render

VIEW_SHAPE = (128, 128)
DENSE_FRAMES = 64


def standard_trajectory_text() -> str:
    return resources.files("evdi").joinpath("data/standard_traj.txt").read_text()


def standard_config_text() -> str:
    return resources.files("evdi").joinpath("data/standard.cfg").read_text()


def standard_config() -> RunConfig:
    return io.parse_config(standard_config_text())


def make_scene(shape, seed: int = 7) -> np.ndarray:
    """Procedural colour texture with hard edges, stripes and smooth shading.

    Values stay inside [0.05, 0.95] so log intensities remain far from the
    simulator floor.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xs / (w - 1), ys / (h - 1)
    img = np.stack([0.25 + 0.3 * u, 0.3 + 0.25 * v, 0.55 - 0.25 * u * v], axis=2)
    for _ in range(22):
        color = rng.uniform(0.08, 0.92, size=3)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        if rng.random() < 0.5:
            rw, rh = rng.uniform(6, 30, size=2)
            mask = (np.abs(xs - cx) < rw) & (np.abs(ys - cy) < rh)
        else:
            r = rng.uniform(5, 20)
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 < r * r
        img[mask] = color
    # stripe patches of different orientation and period
    for _ in range(4):
        cx, cy = rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h)
        ang = rng.uniform(0, np.pi)
        period = rng.uniform(5, 10)
        phase = np.cos(ang) * xs + np.sin(ang) * ys
        stripes = (np.floor(phase / period) % 2).astype(bool)
        mask = (np.abs(xs - cx) < 14) & (np.abs(ys - cy) < 14)
        lo, hi = rng.uniform(0.08, 0.3), rng.uniform(0.6, 0.92)
        img[mask & stripes] = hi
        img[mask & ~stripes] = lo
    return np.clip(img, 0.05, 0.95)


@dataclass
class View:
    view_id: int
    traj: Trajectory
    stream: EventStream
    gt_blur: np.ndarray
    theta: float
    gt_mid: np.ndarray | None = None
    color_targets: dict = field(default_factory=dict)
    _multipliers: list | None = None

    @property
    def multipliers(self) -> list:
        if self._multipliers is None:
            self._multipliers = edi_multipliers(self.stream, self.traj.window, self.theta,
                                                self.traj.timesteps)
        return self._multipliers

    @property
    def mid_pose(self) -> Pose2:
        return trajectory_pose_at(self.traj, self.traj.window.mid)


@dataclass
class Dataset:
    views: list
    view_shape: tuple
    pad: int
    gt_canvas: np.ndarray | None = None


def simulate_view(gt_model: SceneModel, view_id: int, window: ExposureWindow, p0: Pose2, p1: Pose2,
                  cfg: RunConfig, frames: int = DENSE_FRAMES):
    """Dense renders along the motion; returns ``(View, dense_frames)``."""
    if frames < 2:
        raise DomainError("need at least two dense frames per exposure")
    dense = Trajectory.from_endpoints(view_id, window, p0, p1, frames)
    renders = [render(gt_model, p)[0] for p in dense.poses]
    blurry = blur_average(renders)
    seq = FrameSequence.uniform([luma(f) for f in renders], window)
    stream = simulate_events(seq, cfg.theta, cfg.eps_floor)
    traj = Trajectory.from_endpoints(view_id, window, p0, p1, cfg.n_poses)
    gt_mid = render(gt_model, trajectory_pose_at(dense, window.mid))[0]
    return View(view_id, traj, stream, blurry, cfg.theta, gt_mid), renders


def make_dataset(out_dir, cfg: RunConfig, scene: np.ndarray | None = None,
                 trajectory_text: str | None = None, frames: int = DENSE_FRAMES,
                 jobs: int = 1) -> Dataset:
    """Render dense frames along every view's motion and write the dataset directory.

    Per view: ``gt_blur.png`` (plus a lossless ``gt_blur.pfm``), ``events.csv``,
    ``traj.txt`` and ``gt_mid.pfm``.  ``scene`` (if given) must already be
    canvas-sized for the padding the trajectories need.
    """
    specs = io.parse_trajectory_spec(trajectory_text or standard_trajectory_text())
    dense_specs = [Trajectory.from_endpoints(v, w, a, b, frames) for v, w, a, b in specs]
    pad = padding_for(dense_specs, VIEW_SHAPE)
    canvas_shape = (VIEW_SHAPE[0] + 2 * pad, VIEW_SHAPE[1] + 2 * pad)
    if scene is None:
        scene = make_scene(canvas_shape)
    elif scene.shape[:2] != canvas_shape:
        raise DomainError(f"scene must be {canvas_shape} to cover the trajectories, got {scene.shape[:2]}")
    gt_model = SceneModel(scene, np.zeros(canvas_shape + (1,)), VIEW_SHAPE, pad)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_pfm(out / "gt_canvas.pfm", scene)
    (out / "trajectories.txt").write_text(trajectory_text or standard_trajectory_text())
    (out / "meta.txt").write_text(
        f"width = {VIEW_SHAPE[1]}\nheight = {VIEW_SHAPE[0]}\npad = {pad}\n"
        f"theta = {cfg.theta!r}\nviews = {len(specs)}\n")

    def one(spec):
        return simulate_view(gt_model, *spec, cfg, frames)[0]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            simulated = list(pool.map(one, specs))
    else:
        simulated = [one(spec) for spec in specs]
    for view in simulated:
        vid = view.view_id
        vdir = out / f"view_{vid:03d}"
        vdir.mkdir(exist_ok=True)
        io.write_png(vdir / "gt_blur.png", view.gt_blur)
        io.write_pfm(vdir / "gt_blur.pfm", view.gt_blur)
        io.write_pfm(vdir / "gt_mid.pfm", view.gt_mid)
        io.write_events_csv(vdir / "events.csv", view.stream)
        io.write_trajectory(vdir / "traj.txt", view.traj)
    return load_dataset(out, cfg)


def _read_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    return meta


def load_dataset(root, cfg: RunConfig) -> Dataset:
    """Load a dataset directory; the lossless blurry PFM is preferred over the PNG when present."""
    root = Path(root)
    try:
        meta = _read_meta(root / "meta.txt")
        w, h, pad = int(meta["width"]), int(meta["height"]), int(meta["pad"])
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"{root}: not a dataset directory ({exc})") from exc
    views = []
    for vdir in sorted(root.glob("view_*")):
        traj = io.read_trajectory(vdir / "traj.txt")
        if traj.n != cfg.n_poses:
            traj = traj.resampled(cfg.n_poses)
        blur_path = vdir / "gt_blur.pfm"
        gt_blur = io.read_pfm(blur_path) if blur_path.exists() else io.read_png(vdir / "gt_blur.png")
        stream = io.read_events(vdir / "events.csv", (w, h), traj.window)
        mid_path = vdir / "gt_mid.pfm"
        gt_mid = io.read_pfm(mid_path) if mid_path.exists() else None
        views.append(View(traj.view_id, traj, stream, gt_blur, cfg.theta, gt_mid))
    if not views:
        raise ConfigError(f"{root}: no views found")
    gt_path = root / "gt_canvas.pfm"
    gt_canvas = io.read_pfm(gt_path) if gt_path.exists() else None
    return Dataset(views, (h, w), pad, gt_canvas)


def dataset_hash(root) -> str:
    """SHA-256 over every file of a dataset directory, in sorted path order."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
