"""Forecast pipeline end to end and plain-text image output.

Images are plain (ASCII) portable any-maps so outputs diff cleanly:

* ``panoptic.ppm``: colour per pixel from the fixed palette below
* ``selection.pgm``: object selection map, 0 = background, k = k-th kept instance
* ``depth.pgm``: completed background depth in centimetres (maxval 65535)
* ``panoptic.json``: class and instance ids, readable by ``eval``
* ``forecasts.csv``: per-agent forecast boxes in pixels and metres
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from ..refine import KeptInstance, PanopticMap, merge_panoptic
from .io import CheckpointError, assign_params, read_checkpoint
from .scene import SceneSequence, forecast_inputs
from .train import Model, RefineContext, refine_forward, reproject_scene

# background classes: road, sidewalk, building, vegetation, pole
STUFF_COLORS = [(128, 64, 128), (244, 35, 232), (70, 70, 70), (107, 142, 35), (153, 153, 153)]
INSTANCE_COLORS = [(220, 20, 60), (0, 0, 142), (255, 127, 14), (44, 160, 44), (148, 103, 189),
                   (23, 190, 207), (188, 189, 34), (140, 86, 75), (227, 119, 194), (255, 215, 0),
                   (0, 128, 128), (128, 0, 0)]
EMPTY_COLOR = (0, 0, 0)


def color_of(class_id, instance_id):
    if instance_id > 0:
        return INSTANCE_COLORS[instance_id % len(INSTANCE_COLORS)]
    if 0 <= class_id < len(STUFF_COLORS):
        return STUFF_COLORS[class_id]
    return EMPTY_COLOR


def colorize(pmap: PanopticMap):
    h, w = pmap.shape
    rgb = np.zeros((h, w, 3), dtype=int)
    for (c, i) in {(int(c), int(i)) for c, i in zip(pmap.class_id.ravel(), pmap.instance_id.ravel())}:
        rgb[(pmap.class_id == c) & (pmap.instance_id == i)] = color_of(c, i)
    return rgb


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "w") as fh:
        fh.write(f"P3\n{w} {h}\n255\n")
        for row in rgb:
            fh.write(" ".join(f"{r} {g} {b}" for r, g, b in row) + "\n")


def write_pgm(path, gray, maxval=None):
    gray = np.asarray(gray, dtype=int)
    h, w = gray.shape
    maxval = max(int(gray.max()) if gray.size else 1, 1) if maxval is None else maxval
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n{maxval}\n")
        for row in gray:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pnm(path):
    """Read a plain P2/P3 file; returns ``(array, maxval)``."""
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#", 1)[0].split()]
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4:]])
    if magic == "P2":
        return vals.reshape(h, w), maxval
    if magic == "P3":
        return vals.reshape(h, w, 3), maxval
    raise ValueError(f"{path}: unsupported image type {magic!r}")


def depth_to_cm(depth):
    return np.clip(np.floor(np.asarray(depth) * 100.0 + 0.5), 0, 65535).astype(int)


def save_panoptic(path, pmap: PanopticMap, things):
    with open(path, "w") as fh:
        json.dump({"class_id": pmap.class_id.tolist(), "instance_id": pmap.instance_id.tolist(),
                   "things": sorted(int(t) for t in things)}, fh)


def load_panoptic(path):
    """Returns ``(PanopticMap, things)``; scene files yield their target-frame map."""
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") == "psfcast-scene":
        from .io import scene_from_dict
        s = scene_from_dict(d)
        return s.target_panoptic(), s.things()
    try:
        pmap = PanopticMap(np.array(d["class_id"], dtype=int), np.array(d["instance_id"], dtype=int))
    except KeyError as e:
        raise ValueError(f"{path}: panoptic file lacks {e}") from None
    if pmap.class_id.shape != pmap.instance_id.shape:
        raise ValueError(f"{path}: class and instance maps differ in shape")
    return pmap, frozenset(d.get("things", []))


# ----------------------------------------------------------------------------


@dataclass
class Prediction:
    agents: np.ndarray        # scene rows that were forecast
    boxes: np.ndarray         # (Nf, F, 5) pixels + metres
    presence_prob: np.ndarray  # (Nf, F)
    kept_rows: np.ndarray     # indices into ``agents``
    kept: list
    selection: np.ndarray     # (H, W)
    depth: np.ndarray         # (H, W) completed background depth
    bg_logits: np.ndarray
    panoptic: PanopticMap


def load_model(path):
    cfg, norm, values = read_checkpoint(path)
    key = "bgref.net.layers.1.bias"      # one entry per background class
    if key not in values:
        raise CheckpointError(f"{path}: missing {key}")
    model = Model(cfg, len(values[key]))
    assign_params(model.params(), values)
    return cfg, norm, model


def check_compatible(cfg, scene: SceneSequence):
    problems = []
    if (scene.T, scene.F) != (cfg.T, cfg.F):
        problems.append(f"horizon T={scene.T}, F={scene.F} vs checkpoint T={cfg.T}, F={cfg.F}")
    if scene.app.shape[2:] != (cfg.c_app, cfg.app_h, cfg.app_w):
        problems.append(f"appearance shape {scene.app.shape[2:]} vs {(cfg.c_app, cfg.app_h, cfg.app_w)}")
    if problems:
        raise CheckpointError("scene does not match checkpoint: " + "; ".join(problems))


def predict(model: Model, norm, cfg, scene: SceneSequence):
    check_compatible(cfg, scene)
    inp = forecast_inputs(scene, norm)
    out = model.fg.forecast(inp, teacher_forcing=False)
    boxes = norm.unnorm_loc(out.x_hat.data)
    prob = 1.0 / (1.0 + np.exp(-out.p_logit.data))
    keep = np.flatnonzero(prob[:, -1] >= cfg.presence_threshold) if len(out.agents) else np.zeros(0, int)
    kept = [KeptInstance(int(out.agents[k]) + 1, int(scene.classes[out.agents[k]])) for k in keep]
    tgt = scene.T + scene.F - 1
    ctx = RefineContext(scene, reproject_scene(scene), kept, boxes[keep, -1, :4],
                        out.r_hat.data[keep, -1, 0], boxes[keep, -1, 4],
                        scene.semantics[tgt], scene.background_mask(tgt))
    logits, res = refine_forward(model, ctx)
    sel = res.selection.argmax
    pan = merge_panoptic(sel, logits, kept, scene.c_bg)
    return Prediction(out.agents, boxes, prob, keep, kept, sel, res.d_hat.data, logits.data, pan)


FORECAST_HEADER = ["agent", "step", "frame", "x0", "y0", "x1", "y1", "depth", "presence_prob", "kept"]


def forecast_and_render(checkpoint, scene: SceneSequence, out_dir):
    """Writes the files listed in the module docstring; returns the ``Prediction``."""
    cfg, norm, model = load_model(checkpoint)
    pred = predict(model, norm, cfg, scene)
    os.makedirs(out_dir, exist_ok=True)
    write_ppm(os.path.join(out_dir, "panoptic.ppm"), colorize(pred.panoptic))
    save_panoptic(os.path.join(out_dir, "panoptic.json"), pred.panoptic, scene.things())
    write_pgm(os.path.join(out_dir, "selection.pgm"), pred.selection, maxval=max(len(pred.kept), 1))
    write_pgm(os.path.join(out_dir, "depth.pgm"), depth_to_cm(pred.depth), maxval=65535)
    kept = set(pred.kept_rows.tolist())
    with open(os.path.join(out_dir, "forecasts.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FORECAST_HEADER)
        for r, agent in enumerate(pred.agents):
            for s in range(scene.F):
                b = pred.boxes[r, s]
                w.writerow([int(agent) + 1, s + 1, scene.T + s + 1] + [f"{v:.6f}" for v in b]
                           + [f"{pred.presence_prob[r, s]:.6f}", int(r in kept)])
    return pred


def render_reprojection(scene: SceneSequence, out_dir):
    rep = reproject_scene(scene)
    os.makedirs(out_dir, exist_ok=True)
    lab = rep.merged_labels
    write_ppm(os.path.join(out_dir, "reprojected.ppm"),
              colorize(PanopticMap(np.where(lab >= 0, lab, -1), np.zeros_like(lab))))
    write_pgm(os.path.join(out_dir, "reprojected_depth.pgm"), depth_to_cm(rep.merged_depth), maxval=65535)
    write_pgm(os.path.join(out_dir, "coverage.pgm"), rep.Q.astype(int), maxval=1)
    return rep
