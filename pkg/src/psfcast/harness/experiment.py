"""Toy learning-signal experiment: difference vs dot-product location attention
on leader-follower scenes, against the copy-last baseline."""
from __future__ import annotations

import time
from dataclasses import dataclass

from .config import RunConfig
from .scene import generate_scene
from .train import copy_last_loc_loss, train, validation_loc_loss


@dataclass
class SeedOutcome:
    seed: int
    difference: float
    dot: float
    copy_last: float
    seconds: float

    @property
    def difference_wins(self):
        return self.difference <= self.dot

    @property
    def both_beat_copy_last(self):
        return self.difference < self.copy_last and self.dot < self.copy_last


def make_scene(scene_seed, cfg: RunConfig, render=True):
    return generate_scene(scene_seed, cfg.n_agents, cfg.T, cfg.F, cfg.motion, (cfg.height, cfg.width),
                          cfg.gap_prob, cfg.depth_noise, c_app=cfg.c_app, app_hw=(cfg.app_h, cfg.app_w),
                          render=render)


def make_scenes(seed, count, offset, cfg: RunConfig, render=True):
    return [make_scene(seed * 1_000_000 + offset + i, cfg, render) for i in range(count)]


def scene_stream(seed, batch, cfg: RunConfig, offset=0):
    """``step -> list of scenes``: a fresh seeded batch per training step."""
    return lambda step: make_scenes(seed, batch, offset + step * batch, cfg, render=False)


def learning_signal(seed, steps=500, batch=4, n_val=16, base=None):
    """Train both location-attention variants on the same seeded stream of
    4-scene batches and score free-running location loss on held-out scenes."""
    base = base or RunConfig()
    cfg = base.replace(seed=seed, motion="leader-follower", n_agents=4, steps=steps,
                       lr_drop_step=steps * 3 // 4, refine_steps=0, iou_sign="one_minus")
    stream = scene_stream(seed, batch, cfg)
    pool = [stream(step) for step in range(steps)]     # shared by both variants
    first = pool[0] if pool else make_scenes(seed, batch, 0, cfg, render=False)
    val_scenes = make_scenes(seed, n_val, VAL_OFFSET, cfg, render=False)
    t0 = time.perf_counter()
    losses, norm = {}, None
    for variant in ("difference", "dot"):
        res = train(cfg.replace(loc_attention=variant), first, stages=(1,),
                    batches=pool.__getitem__)
        norm = res.norm
        losses[variant] = validation_loc_loss(res.model.fg, val_scenes, res.norm, cfg)
    base_loss = copy_last_loc_loss(val_scenes, norm, cfg)
    return SeedOutcome(seed, losses["difference"], losses["dot"], base_loss, time.perf_counter() - t0)


VAL_OFFSET = 900_000    # validation scene ids sit far past any training stream
