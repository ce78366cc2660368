"""Two-stage training.

Stage 1 fits the foreground forecaster with teacher forcing and the
ground-truth future odometry. Stage 2 fits the prediction-refinement head and
the background refiner; the foreground parameters are not handed to the
stage-2 optimiser, so they stay bitwise fixed.

Loss log columns: ``stage, step, lr`` then every ``LossBreakdown`` field.
Fields a stage does not compute are written as 0.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .. import linalg as L
from ..encdec import Forecaster, collate
from ..geometry import build_reprojected_maps
from ..layers import Module
from ..linalg import Tensor, XorShift64
from ..losses import (LossBreakdown, appearance_loss, bg_refine_loss, loc_loss, presence_loss,
                      refinement_loss, velocity_loss)
from ..refine import BackgroundRefiner, KeptInstance, RefineHead, mask_out
from .config import RunConfig
from .io import save_checkpoint
from .scene import Normalizer, SceneSequence, forecast_inputs


class TrainingDiverged(RuntimeError):
    def __init__(self, stage, step, value):
        super().__init__(f"non-finite loss ({value}) at stage {stage}, step {step}")
        self.stage, self.step = stage, step


class Model(Module):
    """Foreground forecaster, refinement head and background refiner."""

    def __init__(self, cfg: RunConfig, c_bg):
        self.fg = Forecaster(cfg.model_config(), seed=cfg.seed)
        rng = XorShift64(cfg.seed ^ 0x5EED)
        self.refine = RefineHead(rng, c_bg, cfg.refine_width, cfg.depth_scale, cfg.d_fgmax, cfg.temperature)
        self.bgref = BackgroundRefiner(rng, c_bg, cfg.T, cfg.refine_width, cfg.depth_scale)

    def stage_params(self, stage):
        p = self.params()
        if stage == 1:
            return {k: v for k, v in p.items() if k.startswith("fg.")}
        return {k: v for k, v in p.items() if not k.startswith("fg.")}


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def step_lr(base, step, drop_step, factor):
    return base * factor if step >= drop_step else base


# ----------------------------------------------------------------------------
# stage 1


def foreground_losses(model: Forecaster, batch, cfg: RunConfig, teacher_forcing=True):
    """Returns ``(total Tensor, LossBreakdown, ForecastOutput)``."""
    out = model.forecast(batch, teacher_forcing=teacher_forcing)
    a = out.agents
    lam = cfg.lambdas()
    pf = batch.presence_future[a]
    loc = loc_loss(out.x_hat, batch.x_future[a], pf, lam, cfg.iou_sign)
    pres = presence_loss(out.p_logit, pf, lam["presence"])
    app = appearance_loss(out.r_hat, batch.app_future[a], pf, lam["appearance"])
    x_star = np.concatenate([batch.x, batch.x_future[:, :1]], axis=1)
    p_star = np.concatenate([batch.presence, batch.presence_future[:, :1]], axis=1)
    vel = velocity_loss(out.v_hat_E, x_star, p_star, lam["velocity"])
    total = L.add(L.add(loc, pres), L.add(app, vel))
    br = LossBreakdown(loc=float(loc.data), presence=float(pres.data), appearance=float(app.data),
                       velocity=float(vel.data), total_fg=float(total.data))
    return total, br, out


def validation_loc_loss(model: Forecaster, scenes, norm, cfg: RunConfig):
    """Free-running location loss over ``scenes`` (normalised units)."""
    batch = collate([forecast_inputs(s, norm) for s in scenes])
    out = model.forecast(batch, teacher_forcing=False)
    a = out.agents
    return float(loc_loss(out.x_hat, batch.x_future[a], batch.presence_future[a], cfg.lambdas(),
                          cfg.iou_sign).data)


def copy_last_loc_loss(scenes, norm, cfg: RunConfig):
    """Location loss of repeating each agent's last observed box."""
    batch = collate([forecast_inputs(s, norm) for s in scenes])
    a = np.flatnonzero(batch.presence[:, -1])
    pred = np.repeat(batch.x[a, -1:], batch.F, axis=1)
    return float(loc_loss(pred, batch.x_future[a], batch.presence_future[a], cfg.lambdas(),
                          cfg.iou_sign).data)


# ----------------------------------------------------------------------------
# stage 2


@dataclass
class RefineContext:
    scene: SceneSequence
    rep: object
    kept: list
    boxes: np.ndarray          # (K, 4) pixels
    mask_logits: np.ndarray    # (K, h, w)
    depths: np.ndarray         # (K,)
    target_sem: np.ndarray
    target_bg: np.ndarray
    P_star: np.ndarray = None
    extras: dict = field(default_factory=dict)


def reproject_scene(scene: SceneSequence):
    T = scene.T
    poses = [scene.pose_to_target(t) for t in range(T)]
    bg = scene.semantics[:T] < scene.c_bg
    return build_reprojected_maps(scene.semantics[:T], scene.depth[:T], bg, scene.intrinsics, poses)


def ground_truth_context(scene: SceneSequence, rep=None):
    """Refinement inputs built from the exact target-frame boxes and masks."""
    tgt = scene.T + scene.F - 1
    idx = np.flatnonzero(scene.presence[:, tgt])
    kept = [KeptInstance(int(i) + 1, int(scene.classes[i])) for i in idx]
    P = np.zeros(scene.frame_hw, dtype=int)
    for k, i in enumerate(idx, start=1):
        P[scene.instances[tgt] == i + 1] = k
    return RefineContext(scene, rep if rep is not None else reproject_scene(scene), kept,
                         scene.boxes[idx, tgt, :4], scene.app[idx, tgt, 0], scene.boxes[idx, tgt, 4],
                         scene.semantics[tgt], scene.background_mask(tgt), P)


def refine_forward(model: Model, ctx: RefineContext):
    """Returns ``(bg_logits, RefineResult)``; the refinement head sees
    detached background logits."""
    rep = ctx.rep
    logits = model.bgref(rep.labels, rep.depth, rep.valid)
    hw = ctx.scene.frame_hw
    masks = [mask_out(b, m, hw) for b, m in zip(ctx.boxes, ctx.mask_logits)]
    res = model.refine(rep.merged_depth, rep.Q, Tensor(logits.data), masks, list(ctx.depths))
    return logits, res


def refine_losses(model: Model, ctx: RefineContext):
    logits, res = refine_forward(model, ctx)
    bg = bg_refine_loss(L.log_softmax(logits, axis=0), ctx.target_sem, ctx.target_bg, log_input=True)
    sel, bias = refinement_loss(res.selection.log_scores, ctx.P_star, res.bias, log_domain=True)
    total = L.add(bg, L.add(sel, bias))
    return total, LossBreakdown(bg_refine=float(bg.data), refine_select=float(sel.data),
                                refine_bias=float(bias.data))


# ----------------------------------------------------------------------------
# driver


@dataclass
class TrainResult:
    model: Model
    norm: Normalizer
    log: list                 # rows: [stage, step, lr, *LossBreakdown]
    stage1_snapshot: dict = None


def snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


LOG_HEADER = ["stage", "step", "lr"] + LossBreakdown.field_names()


def _check_finite(value, stage, step):
    if not math.isfinite(value):
        raise TrainingDiverged(stage, step, value)


def train(cfg: RunConfig, scenes, out_dir=None, stages=(1, 2), progress=None, batches=None):
    """Train on ``scenes``; optionally write ``checkpoint.txt`` and ``loss_log.csv``.

    ``batches(step)``, when given, supplies the stage-1 scenes for each step
    (a seeded stream); ``scenes`` then only fixes the normaliser and stage 2.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    for s in scenes:
        if (s.T, s.F) != (cfg.T, cfg.F):
            raise ValueError(f"scene horizon T={s.T}, F={s.F} does not match config T={cfg.T}, F={cfg.F}")
    norm = Normalizer.fit(scenes, cfg.d_max)
    model = Model(cfg, scenes[0].c_bg)
    log = []

    if 1 in stages and cfg.steps > 0:
        fixed = collate([forecast_inputs(s, norm) for s in scenes])
        opt = Adam(model.stage_params(1), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for step in range(cfg.steps):
            lr = step_lr(cfg.lr, step, cfg.lr_drop_step, cfg.lr_drop_factor)
            batch = fixed if batches is None else collate([forecast_inputs(s, norm) for s in batches(step)])
            opt.zero_grad()
            total, br, _ = foreground_losses(model.fg, batch, cfg, teacher_forcing=True)
            _check_finite(br.total_fg, 1, step)
            total.backward()
            opt.step(lr)
            log.append([1, step, lr] + br.as_row())
            if progress:
                progress(1, step, br)
    snap = snapshot(model.stage_params(1))

    if 2 in stages and cfg.refine_steps > 0:
        ctxs = [ground_truth_context(s) for s in scenes]
        opt = Adam(model.stage_params(2), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for step in range(cfg.refine_steps):
            lr = step_lr(cfg.refine_lr, step, cfg.refine_drop_step, cfg.lr_drop_factor)
            opt.zero_grad()
            parts = [refine_losses(model, c) for c in ctxs]
            total = L.mul(_sum([p[0] for p in parts]), 1.0 / len(parts))
            br = LossBreakdown(**{k: float(np.mean([getattr(p[1], k) for p in parts]))
                                  for k in ("bg_refine", "refine_select", "refine_bias")})
            _check_finite(float(total.data), 2, step)
            total.backward()
            opt.step(lr)
            log.append([2, step, lr] + br.as_row())
            if progress:
                progress(2, step, br)

    result = TrainResult(model, norm, log, snap)
    if out_dir is not None:
        write_outputs(result, cfg, out_dir)
    return result


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = L.add(out, t)
    return out


def write_outputs(result: TrainResult, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, "checkpoint.txt"), cfg, result.norm, result.model.params())
    write_loss_log(os.path.join(out_dir, "loss_log.csv"), result.log)


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2]))] + [repr(float(v)) for v in r[3:]])
