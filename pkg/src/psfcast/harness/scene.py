"""Synthetic driving scenes.

The world has a ground plane (road / sidewalk), a back wall (building /
vegetation) and one pole. A camera drives forward with a little yaw. Agents
are image-space boxes with a depth that move by one of three motion models:

* ``constant-velocity``: fixed per-agent velocity
* ``accelerating``: fixed per-agent acceleration
* ``leader-follower``: agents come in pairs; the leader's velocity does a
  random walk and the follower copies the leader's velocity from the
  previous frame, so the leader's recent motion predicts the follower's.

Camera convention: x right, y down, z forward. Pixel ``(u, v)`` = (column, row).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, RigidTransform
from ..linalg import XorShift64
from ..refine import PanopticMap, box_pixels

MOTIONS = ("constant-velocity", "accelerating", "leader-follower")
BG_CLASSES = ("road", "sidewalk", "building", "vegetation", "pole")
THING_CLASSES = ("car", "person")

CAM_HEIGHT = 1.5
WALL_Z = 40.0
ROAD_HALF_WIDTH = 3.0
POLE = (2.5, 14.0, 0.35)   # world x, world z, half width


@dataclass
class SceneSequence:
    T: int
    F: int
    K: np.ndarray                  # (3, 3)
    cam_to_world: np.ndarray       # (T+F, 4, 4)
    boxes: np.ndarray              # (N, T+F, 5) pixels + metres
    presence: np.ndarray           # (N, T+F) bool
    classes: np.ndarray            # (N,) thing class
    app: np.ndarray                # (N, T+F, C, h, w)
    odometry: np.ndarray           # (T+F, 5)
    depth: np.ndarray              # (T+F, H, W) observed depth
    semantics: np.ndarray          # (T+F, H, W) class ids, things offset by C_BG
    instances: np.ndarray          # (T+F, H, W) 0 or 1-based agent index
    c_bg: int = len(BG_CLASSES)
    c_things: int = len(THING_CLASSES)
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.boxes.shape[0]

    @property
    def frame_hw(self):
        return self.depth.shape[1:]

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.K)

    def pose_to_target(self, t, target=None):
        """Rigid transform from camera frame ``t`` (0-based) to the target camera."""
        target = self.T + self.F - 1 if target is None else target
        m = np.linalg.inv(self.cam_to_world[target]) @ self.cam_to_world[t]
        return RigidTransform(m[:3, :3], m[:3, 3])

    def background_mask(self, t):
        return self.semantics[t] < self.c_bg

    def target_panoptic(self):
        t = self.T + self.F - 1
        inst = np.where(self.instances[t] > 0, self.c_bg + self.instances[t], 0)
        return PanopticMap(self.semantics[t].copy(), inst)

    def things(self):
        return frozenset(range(self.c_bg, self.c_bg + self.c_things))


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def render_background(K, cam_to_world, hw):
    """Ray-cast depth (camera z) and background class per pixel."""
    h, w = hw
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3).astype(float) @ np.linalg.inv(K).T
    R, c = cam_to_world[:3, :3], cam_to_world[:3, 3]
    dw = rays @ R.T
    depth = np.full(len(rays), np.inf)
    label = np.full(len(rays), 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_wall = (WALL_Z - c[2]) / dw[:, 2]
        hit = (t_wall > 0) & (t_wall < depth)
        x_hit = c[0] + t_wall * dw[:, 0]
        depth = np.where(hit, t_wall, depth)
        label = np.where(hit, np.where(x_hit < 0, 2, 3), label)
        t_gnd = (CAM_HEIGHT - c[1]) / dw[:, 1]
        hit = (dw[:, 1] > 1e-9) & (t_gnd > 0) & (t_gnd < depth)
        x_hit = c[0] + t_gnd * dw[:, 0]
        depth = np.where(hit, t_gnd, depth)
        label = np.where(hit, np.where(np.abs(x_hit) < ROAD_HALF_WIDTH, 0, 1), label)
        px, pz, half = POLE
        t_pole = (pz - c[2]) / dw[:, 2]
        x_hit = c[0] + t_pole * dw[:, 0]
        y_hit = c[1] + t_pole * dw[:, 1]
        hit = (t_pole > 0) & (t_pole < depth) & (np.abs(x_hit - px) < half) & (y_hit < CAM_HEIGHT)
        depth = np.where(hit, t_pole, depth)
        label = np.where(hit, 4, label)
    depth = np.where(np.isfinite(depth), depth, WALL_Z)
    return depth.reshape(h, w), label.reshape(h, w).astype(int)


def _simulate_agents(rng, n, frames, motion, hw):
    """Box corner tracks ``(n, frames, 5)`` in pixels/metres and thing classes."""
    h, w = hw
    boxes = np.zeros((n, frames, 5))
    classes = np.zeros(n, dtype=int)
    vel = np.zeros((n, frames, 3))         # (du, dv, dd) per frame
    centre = np.zeros((n, 3))
    size = np.zeros((n, 2))
    for i in range(n):
        classes[i] = rng.integers(0, len(THING_CLASSES))
        centre[i] = [rng.uniform(0.25 * w, 0.75 * w), rng.uniform(0.45 * h, 0.7 * h), rng.uniform(8.0, 20.0)]
        size[i] = [rng.uniform(7.0, 11.0), rng.uniform(5.0, 8.0)] if classes[i] == 0 else \
                  [rng.uniform(3.5, 5.0), rng.uniform(7.0, 10.0)]
    if motion == "constant-velocity":
        for i in range(n):
            v = [rng.uniform(-2.5, 2.5), rng.uniform(-0.6, 0.6), rng.uniform(-0.3, 0.3)]
            vel[i, :] = v
    elif motion == "accelerating":
        for i in range(n):
            v0 = np.array([rng.uniform(-2.0, 2.0), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)])
            a = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.1, 0.1), rng.uniform(-0.05, 0.05)])
            vel[i] = v0 + np.arange(frames)[:, None] * a
    elif motion == "leader-follower":
        for i in range(0, n, 2):
            v = np.array([rng.uniform(-3.0, 3.0), rng.uniform(-0.8, 0.8), rng.uniform(-0.3, 0.3)])
            for t in range(frames):
                vel[i, t] = v
                v = v + np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1)])
            if i + 1 < n:
                # follower starts beside the leader and copies its lagged velocity
                centre[i + 1] = centre[i] + [rng.uniform(4.0, 7.0) * (1 if rng.uniform() < 0.5 else -1),
                                             rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]
                vel[i + 1, 0] = vel[i, 0]
                vel[i + 1, 1:] = vel[i, :-1]
    else:
        raise ValueError(f"unknown motion {motion!r}; choose from {MOTIONS}")
    pos = centre[:, None, :] + np.concatenate([np.zeros((n, 1, 3)), np.cumsum(vel[:, :-1], axis=1)], axis=1)
    pos[..., 2] = np.maximum(pos[..., 2], 2.0)
    boxes[..., 0] = pos[..., 0] - size[:, None, 0] / 2
    boxes[..., 1] = pos[..., 1] - size[:, None, 1] / 2
    boxes[..., 2] = pos[..., 0] + size[:, None, 0] / 2
    boxes[..., 3] = pos[..., 1] + size[:, None, 1] / 2
    boxes[..., 4] = pos[..., 2]
    return boxes, classes


def _box_in_frame(box, hw):
    r0, r1, c0, c1 = box_pixels(box[:4], hw)
    return r1 > r0 and c1 > c0


def generate_scene(seed, n_agents=3, T=4, F=3, motion="constant-velocity", hw=(24, 32),
                   gap_prob=0.0, depth_noise=0.02, speed=1.0, yaw_rate=0.01, c_app=8, app_hw=(3, 3),
                   zero_velocity=False, app_noise=0.1, render=True):
    """Deterministic synthetic scene for ``seed``.

    Agents are always present at the last input frame ``T``; with
    ``gap_prob`` > 0 earlier input frames drop out at random (occlusion).
    ``render=False`` skips the depth and semantic maps (left as zeros), which
    is all foreground training needs.
    """
    if n_agents < 1:
        raise ValueError("need at least one agent")
    if motion not in MOTIONS:
        raise ValueError(f"unknown motion {motion!r}; choose from {MOTIONS}")
    rng = XorShift64(seed)
    h, w = hw
    frames = T + F
    f = 0.75 * w
    K = np.array([[f, 0.0, (w - 1) / 2], [0.0, f, (h - 1) / 2], [0.0, 0.0, 1.0]])

    cam_to_world = np.zeros((frames, 4, 4))
    odo = np.zeros((frames, 5))
    pos = np.array([0.0, 0.0, 0.0])
    yaw = 0.0
    spd = speed * (0.8 + 0.4 * rng.uniform())
    yr = yaw_rate * (2 * rng.uniform() - 1)
    for t in range(frames):
        if t > 0:
            step = _yaw_matrix(yaw) @ np.array([0.0, 0.0, spd])
            pos = pos + step
            yaw = yaw + yr
            odo[t] = [spd, yr, step[0], step[2], yr]
        m = np.eye(4)
        m[:3, :3] = _yaw_matrix(yaw)
        m[:3, 3] = pos
        cam_to_world[t] = m
    odo[0] = [spd, yr, odo[1, 2] if frames > 1 else 0.0, odo[1, 3] if frames > 1 else spd, yr]

    boxes, classes = _simulate_agents(rng, n_agents, frames, motion, hw)
    if zero_velocity:
        boxes[:] = boxes[:, :1]
    presence = np.array([[_box_in_frame(boxes[i, t], hw) for t in range(frames)] for i in range(n_agents)])
    # keep every agent visible at the last input frame
    for i in range(n_agents):
        if not presence[i, T - 1]:
            shift = np.array([w / 2, h / 2]) - (boxes[i, T - 1, :2] + boxes[i, T - 1, 2:4]) / 2
            boxes[i, :, [0, 2]] += shift[0]
            boxes[i, :, [1, 3]] += shift[1]
        presence[i] = [_box_in_frame(boxes[i, t], hw) for t in range(frames)]
    if gap_prob > 0:
        for i in range(n_agents):
            for t in range(T - 1):
                if rng.uniform() < gap_prob:
                    presence[i, t] = False

    # appearance: a fixed per-class template plus small per-agent variation
    templates = XorShift64(0xA11CE).normal(size=(len(THING_CLASSES), c_app) + tuple(app_hw))
    base = templates[classes] + app_noise * rng.normal(size=(n_agents, c_app) + tuple(app_hw))
    drift = rng.normal(size=(n_agents, c_app, 1, 1))
    app = base[:, None] + 0.02 * np.arange(frames)[None, :, None, None, None] * drift[:, None]
    app[:, :, 0] = 4.0     # channel 0 carries the mask logits: a filled box

    depth = np.zeros((frames, h, w))
    sem = np.zeros((frames, h, w), dtype=int)
    inst = np.zeros((frames, h, w), dtype=int)
    c_bg = len(BG_CLASSES)
    for t in range(frames if render else 0):
        d_bg, lab = render_background(K, cam_to_world[t], hw)
        d, s, ins = d_bg.copy(), lab.copy(), np.zeros((h, w), dtype=int)
        for i in np.argsort(-boxes[:, t, 4], kind="stable"):
            if not presence[i, t]:
                continue
            r0, r1, c0, c1 = box_pixels(boxes[i, t, :4], hw)
            win = boxes[i, t, 4] < d[r0:r1, c0:c1]
            d[r0:r1, c0:c1] = np.where(win, boxes[i, t, 4], d[r0:r1, c0:c1])
            s[r0:r1, c0:c1] = np.where(win, c_bg + classes[i], s[r0:r1, c0:c1])
            ins[r0:r1, c0:c1] = np.where(win, i + 1, ins[r0:r1, c0:c1])
        if t < T and depth_noise > 0:
            d = d * (1.0 + depth_noise * rng.normal(size=(h, w)))
        depth[t], sem[t], inst[t] = d, s, ins

    meta = {"seed": seed, "motion": motion, "gap_prob": gap_prob, "depth_noise": depth_noise}
    return SceneSequence(T, F, K, cam_to_world, boxes, presence, classes, app, odo, depth, sem, inst,
                         meta=meta)


# ----------------------------------------------------------------------------
# normalisation


@dataclass
class Normalizer:
    """Maps pixel boxes and metric depth to [-1, 1] and standardises odometry."""

    width: int
    height: int
    d_max: float = 50.0
    odo_mean: np.ndarray = field(default_factory=lambda: np.zeros(5))
    odo_std: np.ndarray = field(default_factory=lambda: np.ones(5))

    @classmethod
    def fit(cls, scenes, d_max=50.0):
        odo = np.concatenate([s.odometry for s in scenes])
        std = odo.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        h, w = scenes[0].frame_hw
        return cls(int(w), int(h), d_max, odo.mean(axis=0), std)

    def _scale(self):
        return np.array([self.width - 1, self.height - 1, self.width - 1, self.height - 1, self.d_max], float)

    def norm_loc(self, x):
        return 2.0 * np.asarray(x, float) / self._scale() - 1.0

    def unnorm_loc(self, x):
        return (np.asarray(x, float) + 1.0) * self._scale() / 2.0

    def norm_odo(self, o):
        return (np.asarray(o, float) - self.odo_mean) / self.odo_std

    def unnorm_odo(self, o):
        return np.asarray(o, float) * self.odo_std + self.odo_mean

    def to_dict(self):
        return {"width": self.width, "height": self.height, "d_max": self.d_max,
                "odo_mean": [float(v) for v in self.odo_mean], "odo_std": [float(v) for v in self.odo_std]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["width"]), int(d["height"]), float(d["d_max"]),
                   np.array(d["odo_mean"], float), np.array(d["odo_std"], float))


def forecast_inputs(scene: SceneSequence, norm: Normalizer):
    """Normalised model inputs, including future targets for training."""
    from ..encdec import ForecastInputs

    T = scene.T
    x = norm.norm_loc(scene.boxes)
    odo = np.broadcast_to(norm.norm_odo(scene.odometry), (scene.N,) + scene.odometry.shape).copy()
    return ForecastInputs(x[:, :T], scene.presence[:, :T], scene.classes, scene.app[:, :T], odo, scene.F,
                          x_future=x[:, T:], app_future=scene.app[:, T:],
                          presence_future=scene.presence[:, T:])
