"""End-to-end run: dataset, Stage 1, Stage 2, refinement, colour correction, evaluation."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, plotting
from .core import RunConfig
from .crf import luma
from .dataset import make_dataset
from .diffusion import make_codec, refine_render
from .edi import edi_deblur, edi_weights
from .optimize import LossLog, init_from_edi, save_checkpoint, train_stage1, train_stage2
from .postprocess import color_correct, psnr, ssim
from .scene import render

METRIC_HEADER = "view,method,psnr,ssim,psnr_luma"


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any error with the pipeline stage prepended to its message."""
    try:
        yield
    except Exception as exc:  # noqa: BLE001 - re-raised with the same type
        try:
            tagged = type(exc)(f"[{name}] {exc}")
        except TypeError:
            raise exc
        raise tagged from exc


@dataclass
class PipelineResult:
    out_dir: Path
    metrics: list
    metrics_csv: Path
    stage1_log: list = field(default_factory=list)
    stage2_log: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def metric_row(view_id, method: str, pred: np.ndarray, gt: np.ndarray) -> dict:
    """Colour metrics, or luma metrics throughout when ``pred`` is single-channel."""
    pred = np.clip(pred, 0.0, 1.0)
    if pred.shape[2] == 1:
        gt = luma(gt)
    return {
        "view": view_id,
        "method": method,
        "psnr": psnr(pred, gt),
        "ssim": ssim(pred, gt),
        "psnr_luma": psnr(luma(pred), luma(gt)) if pred.shape[2] == 3 else psnr(pred, gt),
    }


def format_metrics(rows: list) -> str:
    """Fixed-precision CSV so equal runs give byte-identical files."""
    lines = [METRIC_HEADER]
    for r in rows:
        lines.append(f"{r['view']},{r['method']},{r['psnr']:.6f},{r['ssim']:.6f},{r['psnr_luma']:.6f}")
    return "\n".join(lines) + "\n"


def _with_means(rows: list) -> list:
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    out = list(rows)
    for m in methods:
        sel = [r for r in rows if r["method"] == m]
        out.append({"view": "mean", "method": m,
                    **{k: float(np.mean([r[k] for r in sel])) for k in ("psnr", "ssim", "psnr_luma")}})
    return out


def cmd_pipeline(cfg: RunConfig, out_dir, skip_stage2: bool = False, jobs: int = 1,
                 scene: np.ndarray | None = None, trajectory_text: str | None = None) -> PipelineResult:
    """Run every stage and write ``metrics.csv``, loss logs, checkpoints and PNG panels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(io.format_config(cfg))
    timings = {}

    t0 = time.perf_counter()
    with stage("make-dataset"):
        ds = make_dataset(out / "dataset", cfg, scene=scene, trajectory_text=trajectory_text, jobs=jobs)
    timings["make-dataset"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with stage("stage1"):
        model, crf = init_from_edi(ds, cfg)
        log1 = LossLog(out / "stage1_loss.csv")
        try:
            model, crf, state1 = train_stage1(ds, cfg, model, crf, loss_log=log1)
        finally:
            log1.close()
        save_checkpoint(out / "stage1", model, crf, state1)
    timings["stage1"] = time.perf_counter() - t0

    log2 = LossLog(None)
    if not skip_stage2:
        t0 = time.perf_counter()
        with stage("stage2"):
            log2 = LossLog(out / "stage2_loss.csv")
            try:
                model, state2 = train_stage2(model, crf, ds, cfg, loss_log=log2)
            finally:
                log2.close()
            save_checkpoint(out / "stage2", model, crf, state2)
        timings["stage2"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    with stage("eval"):
        codec = make_codec(cfg.codec)
        rows = []
        panels = out / "panels"
        panels.mkdir(exist_ok=True)
        for view in ds.views:
            w = view.traj.window
            pose = view.mid_pose
            gt = view.gt_mid
            edi = edi_deblur(luma(view.gt_blur), edi_weights(view.stream, w, cfg.theta, w.mid))
            stage1_img = render(model, pose)[0]
            rows.append(metric_row(view.view_id, "blurry", view.gt_blur, gt))
            rows.append(metric_row(view.view_id, "edi", edi, gt))
            rows.append(metric_row(view.view_id, "stage1", stage1_img, gt))
            images = [view.gt_blur, edi, stage1_img]
            titles = ["blurry", "EDI (luma)", "stage 1"]
            if not skip_stage2:
                refined = refine_render(model, pose, codec)
                final = color_correct(np.clip(refined, 0.0, 1.0), np.clip(stage1_img, 0.0, 1.0),
                                      cfg.wavelet_levels)
                rows.append(metric_row(view.view_id, "refined", refined, gt))
                rows.append(metric_row(view.view_id, "final", final, gt))
                images += [refined, final]
                titles += ["refined", "colour corrected"]
            images.append(gt)
            titles.append("ground truth")
            plotting.save_panel(panels / f"view_{view.view_id:03d}.png", images, titles,
                                suptitle=f"view {view.view_id}, mid-exposure")
        rows = _with_means(rows)
        metrics_csv = out / "metrics.csv"
        metrics_csv.write_text(format_metrics(rows))
        plotting.save_loss_curves(out / "stage1_loss.png", log1.rows, "stage 1")
        if log2.rows:
            plotting.save_loss_curves(out / "stage2_loss.png", log2.rows, "stage 2")
        x, y = crf.curve()
        plotting.save_crf_curve(out / "crf.png", x, y)
    timings["eval"] = time.perf_counter() - t0
    return PipelineResult(out, rows, metrics_csv, log1.rows, log2.rows, timings)
