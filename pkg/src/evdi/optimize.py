"""Stage-1 and Stage-2 training loops, the Adam optimizer, and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .core import ConfigError, NumericError, RunConfig
from .crf import CrfParams
from .diffusion import (DiffusionSchedule, make_codec, make_denoiser, stage1_rsd_term,
                        stage2_step, stage2_timestep)
from .edi import edi_deblur_color
from .losses import TERMS, Gates, loss_stage1
from .scene import SceneModel, back_warp

log = logging.getLogger(__name__)


class FrozenParameterError(RuntimeError):
    """An update was requested for a parameter group that is frozen."""


class Adam:
    """Per-group Adam.  Parameters are updated in place."""

    def __init__(self, groups: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 frozen=()):
        self.groups = dict(groups)  # name -> (array, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(p) for k, (p, _) in self.groups.items()}
        self.v = {k: np.zeros_like(p) for k, (p, _) in self.groups.items()}
        self.steps = {k: 0 for k in self.groups}

    def step(self, name: str, grad: np.ndarray) -> None:
        if name in self.frozen:
            raise FrozenParameterError(f"parameter group {name!r} is frozen")
        param, lr = self.groups[name]
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        self.steps[name] += 1
        k = self.steps[name]
        mhat = m / (1 - self.beta1 ** k)
        vhat = v / (1 - self.beta2 ** k)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        out = {}
        for k in self.groups:
            out[f"m_{k}"] = self.m[k]
            out[f"v_{k}"] = self.v[k]
            out[f"steps_{k}"] = np.array(self.steps[k])
        return out

    def load_state_dict(self, state: dict) -> None:
        for k in self.groups:
            if f"m_{k}" in state:
                self.m[k] = np.array(state[f"m_{k}"], dtype=np.float64)
                self.v[k] = np.array(state[f"v_{k}"], dtype=np.float64)
                self.steps[k] = int(state[f"steps_{k}"])


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    iteration: int = 0
    rng_state: dict | None = None
    perm: list = field(default_factory=list)
    pos: int = 0
    optimizer: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)
    stage: int = 1

    def rng(self, seed: int) -> np.random.Generator:
        gen = np.random.default_rng(seed)
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def next_view(state: TrainState, n_views: int, rng) -> int:
    """Round-robin over views with a fresh seeded shuffle at the start of every epoch."""
    if state.pos >= len(state.perm) or len(state.perm) != n_views:
        state.perm = [int(v) for v in rng.permutation(n_views)]
        state.pos = 0
    v = state.perm[state.pos]
    state.pos += 1
    return v


# ---------------------------------------------------------------------------
# initialization


def init_from_edi(dataset, cfg: RunConfig) -> tuple:
    """Canvas from the colour EDI latent of the first view, back-warped by its mid pose.

    Returns ``(SceneModel, CrfParams)`` with a zero residual and identity CRF.
    """
    view = dataset.views[0]
    w = view.traj.window
    latent = edi_deblur_color(view.gt_blur, view.stream, w, cfg.theta, w.mid)
    latent = np.maximum(latent, 0.0)
    canvas = back_warp(latent, view.mid_pose, dataset.view_shape, dataset.pad)
    residual = np.zeros(canvas.shape[:2] + (cfg.residual_channels,))
    model = SceneModel(canvas, residual, tuple(dataset.view_shape), dataset.pad)
    return model, fresh_crf(cfg)


def fresh_crf(cfg: RunConfig) -> CrfParams:
    return CrfParams.identity(cfg.crf_knots, 3 if cfg.crf_per_channel else None)


# ---------------------------------------------------------------------------
# stage 1


def make_rsd(cfg: RunConfig):
    """Callable supplying the Stage-1 RSD term, or ``None`` when its weight is zero."""
    if cfg.lambda_rsd == 0:
        return None
    schedule = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    codec = make_codec(cfg.codec)
    if cfg.denoiser == "oracle":
        raise ConfigError("the oracle denoiser is test-only and cannot drive training")
    denoiser = make_denoiser(cfg.denoiser, schedule)

    def rsd(model, view, blur, rng):
        t = int(rng.integers(cfg.stage1_t_min, cfg.stage1_t_max + 1))
        return stage1_rsd_term(model, view.traj, view.gt_blur, codec, denoiser, schedule, t,
                               rng=rng, blur=blur, coupled=cfg.coupled_noise)

    return rsd


def _check_finite(report, iteration: int) -> None:
    for name in TERMS:
        v = report.terms[name]
        if not math.isfinite(v):
            raise NumericError(f"iteration {iteration}: loss term {name!r} is {v}; "
                               f"terms: {report.terms}")
    if not (np.all(np.isfinite(report.canvas)) and np.all(np.isfinite(report.crf))):
        raise NumericError(f"iteration {iteration}: non-finite gradient; terms: {report.terms}")


def _stage1_optimizer(model, crf, cfg):
    return Adam({"canvas": (model.canvas, cfg.lr_canvas), "crf": (crf.logits, cfg.lr_crf)},
                cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


class LossLog:
    """``iter,term,value`` rows, buffered in memory and optionally mirrored to a file."""

    def __init__(self, path=None, append: bool = False):
        self.rows = []
        self.fh = None
        if path is not None:
            self.fh = open(path, "a" if append else "w")
            if not append:
                self.fh.write("iter,term,value\n")

    def add(self, iteration: int, terms: dict) -> None:
        for name, value in terms.items():
            self.rows.append((iteration, name, value))
            if self.fh:
                self.fh.write(f"{iteration},{name},{float(value)!r}\n")

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


def train_stage1(dataset, cfg: RunConfig, model: SceneModel | None = None,
                 crf: CrfParams | None = None, state: TrainState | None = None,
                 iterations: int | None = None, loss_log: LossLog | None = None,
                 checkpoint_dir=None, history: list | None = None):
    """Optimize canvas and CRF on the Stage-1 objective.

    ``iterations`` (default ``cfg.iters_stage1``) is the total run length; a
    resumed ``state`` continues from its iteration.  Warm-up gates are
    fractions of that total.  Returns ``(model, crf, state)``.  When
    ``history`` is a list, one dict of term values per iteration is appended.
    """
    total = cfg.iters_stage1 if iterations is None else iterations
    if model is None:
        model, crf = init_from_edi(dataset, cfg)
    crf = crf if crf is not None else fresh_crf(cfg)
    state = state or TrainState()
    rng = state.rng(cfg.seed)
    opt = _stage1_optimizer(model, crf, cfg)
    opt.load_state_dict(state.optimizer)
    rsd = make_rsd(cfg)
    while state.iteration < total:
        it = state.iteration
        gates = Gates.at(it, total, cfg)
        view = dataset.views[next_view(state, len(dataset.views), rng)]
        report = loss_stage1(model, crf, view, cfg, gates, rng, rsd=rsd)
        _check_finite(report, it)
        opt.step("canvas", report.canvas)
        if gates.crf:
            opt.step("crf", report.crf)
        terms = dict(report.terms, total=report.total, view=view.view_id, index=report.index)
        if history is not None:
            history.append(terms)
        if loss_log is not None and (it % max(cfg.log_every, 1) == 0 or it == total - 1):
            loss_log.add(it, dict(report.terms, total=report.total))
        state.iteration = it + 1
        state.gates = {"crf": gates.crf, "simul": gates.simul}
        if checkpoint_dir and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            state.rng_state = rng.bit_generator.state
            state.optimizer = opt.state_dict()
            save_checkpoint(checkpoint_dir, model, crf, state)
    state.rng_state = rng.bit_generator.state
    state.optimizer = opt.state_dict()
    return model, crf, state


# ---------------------------------------------------------------------------
# stage 2


def train_stage2(model: SceneModel, crf: CrfParams, dataset, cfg: RunConfig,
                 state: TrainState | None = None, iterations: int | None = None,
                 loss_log: LossLog | None = None, denoiser=None):
    """Optimize only the residual features on the RSD objective.

    Canvas and CRF arrays are made read-only for the duration so any stray
    write fails loudly.  Returns ``(model, state)``.
    """
    total = cfg.iters_stage2 if iterations is None else iterations
    if state is None or state.stage != 2:
        state = TrainState(stage=2)
    rng = state.rng(cfg.seed + 1)
    schedule = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    codec = make_codec(cfg.codec)
    if denoiser is None:
        if cfg.denoiser == "oracle":
            raise ConfigError("the oracle denoiser is test-only and cannot drive training")
        denoiser = make_denoiser(cfg.denoiser, schedule)
    opt = Adam({"residual": (model.residual, cfg.lr_residual), "canvas": (model.canvas, 0.0),
                "crf": (crf.logits, 0.0)},
               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, frozen=("canvas", "crf"))
    opt.load_state_dict(state.optimizer)
    flags = [(a, a.flags.writeable) for a in (model.canvas, crf.logits)]
    for a, _ in flags:
        a.setflags(write=False)
    try:
        while state.iteration < total:
            it = state.iteration
            view = dataset.views[next_view(state, len(dataset.views), rng)]
            pose = view.traj.poses[int(rng.integers(view.traj.n))]
            t = stage2_timestep(it, total, cfg.stage2_t_max, cfg.stage2_t_min, cfg.diffusion_steps)
            value, grad = stage2_step(model, pose, codec, denoiser, schedule, t, rng=rng,
                                      coupled=cfg.coupled_noise)
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise NumericError(f"stage-2 iteration {it}: loss term 'rsd' is {value}")
            opt.step("residual", grad)
            if loss_log is not None and (it % max(cfg.log_every, 1) == 0 or it == total - 1):
                loss_log.add(it, {"rsd": value, "t": float(t)})
            state.iteration = it + 1
    finally:
        for a, writeable in flags:
            a.setflags(write=writeable)
    state.rng_state = rng.bit_generator.state
    state.optimizer = opt.state_dict()
    return model, state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model: SceneModel, crf: CrfParams, state: TrainState) -> Path:
    """Write PFM stacks (for viewing), the CRF logits CSV and an exact float64 state file."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_pfm_stack(d / "canvas", model.canvas)
    io.write_pfm_stack(d / "residual", model.residual)
    rows = np.atleast_2d(crf.logits)
    with open(d / "crf.csv", "w") as fh:
        fh.write("row," + ",".join(f"k{j}" for j in range(rows.shape[1])) + "\n")
        for r, vals in enumerate(rows):
            fh.write(f"{r}," + ",".join(repr(float(v)) for v in vals) + "\n")
    arrays = {"canvas": model.canvas, "residual": model.residual, "crf": crf.logits}
    arrays.update({f"opt_{k}": v for k, v in state.optimizer.items()})
    with open(d / "state.npz", "wb") as fh:
        np.savez(fh, **arrays)
    meta = {
        "iteration": state.iteration,
        "stage": state.stage,
        "perm": state.perm,
        "pos": state.pos,
        "gates": state.gates,
        "rng_state": state.rng_state,
        "view_shape": list(model.view_shape),
        "pad": model.pad,
        "crf_per_channel": crf.per_channel,
    }
    (d / "state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> tuple:
    """Return ``(SceneModel, CrfParams, TrainState)`` exactly as saved."""
    d = Path(directory)
    try:
        meta = json.loads((d / "state.json").read_text())
        with np.load(d / "state.npz") as z:
            arrays = {k: z[k].copy() for k in z.files}
    except (OSError, ValueError, KeyError) as exc:
        raise OSError(f"cannot read checkpoint {d}: {exc}") from exc
    model = SceneModel(arrays["canvas"], arrays["residual"], tuple(meta["view_shape"]), int(meta["pad"]))
    crf = CrfParams(arrays["crf"])
    opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt_")}
    state = TrainState(meta["iteration"], meta["rng_state"], meta["perm"], meta["pos"], opt,
                       meta["gates"], meta["stage"])
    return model, crf, state
