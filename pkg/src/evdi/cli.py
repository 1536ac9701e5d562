"""Command-line interface: ``evdi <subcommand> ...``.

Exit codes: 0 success, 2 configuration or argument error, 3 numeric failure,
4 IO error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .core import ConfigError, DomainError, ExposureWindow, NumericError, RunConfig
from .crf import luma

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".pfm")


def _config(args) -> RunConfig:
    from .dataset import standard_config

    base = standard_config() if getattr(args, "standard", True) else RunConfig()
    cfg = io.load_config(args.config, base) if getattr(args, "config", None) else base
    changes = {}
    for key in ("seed", "iters_stage1", "iters_stage2", "theta", "denoiser", "codec"):
        v = getattr(args, key, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "coupled_noise", False):
        changes["coupled_noise"] = True
    try:
        return cfg.replace(**changes) if changes else cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _window(args) -> ExposureWindow:
    if getattr(args, "traj", None):
        return io.read_trajectory(args.traj).window
    mid = args.mid if args.mid is not None else args.tau / 2
    return ExposureWindow(mid, args.tau)


def _image_files(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise OSError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _gray(img: np.ndarray) -> np.ndarray:
    return luma(img) if img.shape[2] == 3 else img[:, :, :1]


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    from .eventsim import FrameSequence, simulate_events

    files = _image_files(args.frames)
    frames = [_gray(io.read_image(p)) for p in files]
    window = _window(args)
    seq = FrameSequence.uniform(frames, window)
    stream = simulate_events(seq, args.theta, args.eps_floor)
    io.write_events(args.out, stream)
    print(f"{len(stream)} events from {len(frames)} frames -> {args.out}")
    return EXIT_OK


def cmd_synth_blur(args) -> int:
    from .blur import blur_average
    from .core import Trajectory, trajectory_pose_at
    from .dataset import VIEW_SHAPE, make_scene, standard_trajectory_text
    from .scene import SceneModel, padding_for, render

    cfg = _config(args)
    text = Path(args.traj).read_text() if args.traj else standard_trajectory_text()
    specs = io.parse_trajectory_spec(text)
    dense = [Trajectory.from_endpoints(v, w, a, b, args.n_frames) for v, w, a, b in specs]
    pad = padding_for(dense, VIEW_SHAPE)
    shape = (VIEW_SHAPE[0] + 2 * pad, VIEW_SHAPE[1] + 2 * pad)
    scene = io.read_image(args.scene) if args.scene else make_scene(shape)
    if scene.shape[:2] != shape:
        raise DomainError(f"scene must be {shape} to cover the trajectories, got {scene.shape[:2]}")
    model = SceneModel(scene, np.zeros(shape + (1,)), VIEW_SHAPE, pad)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for traj in dense:
        frames = [render(model, p)[0] for p in traj.poses]
        vdir = out / f"view_{traj.view_id:03d}"
        vdir.mkdir(exist_ok=True)
        io.write_png(vdir / "blurry.png", blur_average(frames))
        io.write_pfm(vdir / "sharp_mid.pfm", render(model, trajectory_pose_at(traj, traj.window.mid))[0])
        io.write_trajectory(vdir / "traj.txt", traj.resampled(cfg.n_poses))
    print(f"{len(dense)} views -> {out}")
    return EXIT_OK


def cmd_deblur(args) -> int:
    from .edi import edi_deblur, edi_deblur_color, edi_weights

    blurry = io.read_image(args.blurry)
    window = _window(args)
    t = window.mid if args.t == "mid" else float(args.t)
    stream = io.read_events(args.events, (blurry.shape[1], blurry.shape[0]), window)
    if blurry.shape[2] == 1:
        sharp = edi_deblur(blurry, edi_weights(stream, window, args.theta, t))
    else:
        sharp = edi_deblur_color(blurry, stream, window, args.theta, t)
    io.write_image(args.out, np.maximum(sharp, 0.0))
    print(f"deblurred at t={t!r} -> {args.out}")
    return EXIT_OK


def cmd_make_dataset(args) -> int:
    from .dataset import dataset_hash, make_dataset

    cfg = _config(args)
    scene = io.read_image(args.scene) if args.scene else None
    text = Path(args.traj).read_text() if args.traj else None
    ds = make_dataset(args.out, cfg, scene=scene, trajectory_text=text, frames=args.n_frames,
                      jobs=args.jobs)
    print(f"{len(ds.views)} views, pad {ds.pad} -> {args.out}")
    print(f"sha256 {dataset_hash(args.out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .optimize import LossLog, init_from_edi, load_checkpoint, save_checkpoint, train_stage1

    cfg = _config(args)
    ds = load_dataset(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        model, crf, state = load_checkpoint(args.resume)
    else:
        (model, crf), state = init_from_edi(ds, cfg), None
    log = LossLog(out / "loss.csv", append=bool(args.resume))
    try:
        model, crf, state = train_stage1(ds, cfg, model, crf, state, loss_log=log, checkpoint_dir=out)
    finally:
        log.close()
    save_checkpoint(out, model, crf, state)
    print(f"stage 1: {state.iteration} iterations -> {out}")
    return EXIT_OK


def cmd_refine(args) -> int:
    from .dataset import load_dataset
    from .diffusion import DiffusionSchedule, make_codec, refine_render
    from .optimize import LossLog, load_checkpoint, save_checkpoint, train_stage2

    cfg = _config(args)
    ds = load_dataset(args.data, cfg)
    model, crf, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.schedule_csv:
        sched = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
        Path(args.schedule_csv).write_text(sched.to_csv())
    log = LossLog(out / "loss.csv")
    try:
        model, state = train_stage2(model, crf, ds, cfg, loss_log=log)
    finally:
        log.close()
    save_checkpoint(out, model, crf, state)
    codec = make_codec(cfg.codec)
    for view in ds.views:
        io.write_png(out / f"refined_{view.view_id:03d}.png", refine_render(model, view.mid_pose, codec))
    print(f"stage 2: {state.iteration} iterations -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import format_metrics, metric_row

    gt_files = {p.stem: p for p in _image_files(args.gt)}
    rows = []
    for p in _image_files(args.pred):
        if p.stem not in gt_files:
            continue
        pred = io.read_image(p)
        gt = io.read_image(gt_files[p.stem])
        if gt.shape[2] == 1 and pred.shape[2] == 1:
            gt = np.repeat(gt, 3, axis=2)
        rows.append(metric_row(p.stem, args.method, pred, gt))
    if not rows:
        raise OSError("no matching image names between --pred and --gt")
    sys.stdout.write(format_metrics(rows))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import cmd_pipeline as run

    cfg = _config(args)
    if args.schedule_csv:
        from .diffusion import DiffusionSchedule

        sched = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
        Path(args.schedule_csv).write_text(sched.to_csv())
    res = run(cfg, args.out, skip_stage2=args.skip_stage2, jobs=args.jobs)
    sys.stdout.write(res.metrics_csv.read_text())
    return EXIT_OK


def cmd_export_crf(args) -> int:
    from .optimize import load_checkpoint

    _, crf, _ = load_checkpoint(args.ckpt)
    x, y = crf.curve(args.samples)
    header = "x," + ",".join(f"c{c}" for c in range(y.shape[1]))
    lines = [header] + [f"{float(xi)!r}," + ",".join(repr(float(v)) for v in row) for xi, row in zip(x, y)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    if args.plot:
        from .plotting import save_crf_curve

        save_crf_curve(args.plot, x, y)
    print(f"{args.samples} samples -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_options(p, stage2: bool = False):
    p.add_argument("--config", help="key = value config file (defaults: shipped standard config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--iters-stage1", dest="iters_stage1", type=int)
    if stage2:
        p.add_argument("--iters-stage2", dest="iters_stage2", type=int)
        p.add_argument("--denoiser", choices=("zero", "shrinkage"))
        p.add_argument("--codec", choices=("identity", "avgpool"))
        p.add_argument("--coupled-noise", action="store_true", help="reuse one noise draw for t and t-1")
        p.add_argument("--schedule-csv", help="also dump the diffusion schedule to this CSV")


def _add_window(p):
    p.add_argument("--tau", type=float, default=0.04, help="exposure length in seconds")
    p.add_argument("--mid", type=float, help="mid-exposure time (default tau/2)")
    p.add_argument("--traj", help="take the exposure window from a per-view trajectory file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evdi", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="events from a directory of sharp frames")
    p.add_argument("--frames", required=True, help="directory of PNG/PFM frames, sorted by name")
    p.add_argument("--theta", type=float, default=0.2)
    p.add_argument("--eps-floor", dest="eps_floor", type=float, default=1e-3)
    p.add_argument("--out", required=True, help="events.csv (or .bin)")
    _add_window(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("synth-blur", help="blurry images and sharp ground truth along trajectories")
    p.add_argument("--scene", help="canvas image (default: procedural standard scene)")
    p.add_argument("--traj", help="trajectory spec (default: shipped standard spec)")
    p.add_argument("--n-frames", dest="n_frames", type=int, default=64)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_blur)

    p = sub.add_parser("deblur", help="EDI deblurring of one blurry image")
    p.add_argument("--blurry", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--theta", type=float, default=0.2)
    p.add_argument("--t", default="mid", help="latent timestep in seconds, or 'mid'")
    p.add_argument("--out", required=True)
    _add_window(p)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("make-dataset", help="synthesize the multi-view dataset")
    p.add_argument("--scene")
    p.add_argument("--traj")
    p.add_argument("--n-frames", dest="n_frames", type=int, default=64)
    p.add_argument("--config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="Stage-1 optimization")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    _add_run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="Stage-2 residual refinement")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_options(p, stage2=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="PSNR/SSIM table for matching file names")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--method", default="pred")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="dataset, both stages, refinement and evaluation")
    p.add_argument("--out", required=True)
    p.add_argument("--skip-stage2", dest="skip_stage2", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    _add_run_options(p, stage2=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("export-crf", help="dump the learned response curve as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--plot", help="optional PNG of the curve")
    p.set_defaults(func=cmd_export_crf)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        io.eprint(f"evdi: error: {exc}")
        return EXIT_CONFIG
    except NumericError as exc:
        io.eprint(f"evdi: numeric failure: {exc}")
        return EXIT_NUMERIC
    except OSError as exc:
        io.eprint(f"evdi: io error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
