"""Scene files and checkpoints.

Scene files are JSON text (schema in ``docs/scene_format.md``). Floats are
written with ``repr``, which round-trips exactly. Checkpoints are a
line-oriented text file with every parameter in base-16 float notation.
"""
from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .config import RunConfig
from .scene import Normalizer, SceneSequence

SCENE_FORMAT = "psfcast-scene"
SCENE_VERSION = (1, 1)

# name -> (dtype, ndim); shapes are cross-checked in _check_schema
_ARRAYS = {
    "K": ("float", 2), "cam_to_world": ("float", 3), "boxes": ("float", 3), "presence": ("bool", 2),
    "classes": ("int", 1), "app": ("float", 5), "odometry": ("float", 2), "depth": ("float", 3),
    "semantics": ("int", 3), "instances": ("int", 3),
}
_DTYPES = {"float": np.float64, "int": np.int64, "bool": bool}

# fields added in minor versions, with the value an older file implies
_UPGRADES = {
    (1, 1): {"c_things": 2, "meta": {}},
}


class SceneFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _encode(a, kind):
    a = np.asarray(a)
    if kind == "float":
        data = [float(v) for v in a.ravel()]
    elif kind == "int":
        data = [int(v) for v in a.ravel()]
    else:
        data = [bool(v) for v in a.ravel()]
    return {"shape": list(a.shape), "data": data}


def scene_to_dict(scene: SceneSequence):
    out = {"format": SCENE_FORMAT, "version": "%d.%d" % SCENE_VERSION,
           "T": scene.T, "F": scene.F, "c_bg": scene.c_bg, "c_things": scene.c_things,
           "meta": scene.meta}
    for name, (kind, _) in _ARRAYS.items():
        out[name] = _encode(getattr(scene, name), kind)
    return out


def save_scene(scene: SceneSequence, path):
    text = json.dumps(scene_to_dict(scene), separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(text + "\n")


def _parse_version(v):
    try:
        major, minor = (int(x) for x in str(v).split("."))
    except ValueError:
        raise SceneFormatError(f"malformed version {v!r}") from None
    return major, minor


def upgrade_scene_dict(d):
    """Fill fields introduced after the file's minor version."""
    major, minor = _parse_version(d.get("version"))
    if major != SCENE_VERSION[0]:
        raise SceneFormatError(f"unsupported scene version {major}.{minor}; this reader handles "
                               f"{SCENE_VERSION[0]}.x")
    if minor > SCENE_VERSION[1]:
        raise SceneFormatError(f"scene version {major}.{minor} is newer than this reader "
                               f"({SCENE_VERSION[0]}.{SCENE_VERSION[1]})")
    d = dict(d)
    for ver, defaults in sorted(_UPGRADES.items()):
        if (major, minor) < ver:
            for k, v in defaults.items():
                d.setdefault(k, v)
    d["version"] = "%d.%d" % SCENE_VERSION
    return d


def _decode(name, entry):
    kind, ndim = _ARRAYS[name]
    if not isinstance(entry, dict) or "shape" not in entry or "data" not in entry:
        raise SceneFormatError(f"{name}: expected an object with 'shape' and 'data'")
    shape = tuple(entry["shape"])
    if len(shape) != ndim:
        raise SceneFormatError(f"{name}: expected {ndim} dimensions, got shape {shape}")
    data = entry["data"]
    if len(data) != int(np.prod(shape)):
        raise SceneFormatError(f"{name}: {len(data)} values for shape {shape}")
    return np.array(data, dtype=_DTYPES[kind]).reshape(shape)


def _check_schema(a, T, F):
    n = a["boxes"].shape[0]
    frames = T + F
    expect = {"K": (3, 3), "cam_to_world": (frames, 4, 4), "boxes": (n, frames, 5),
              "presence": (n, frames), "classes": (n,), "odometry": (frames, 5)}
    for k, shp in expect.items():
        if a[k].shape != shp:
            raise SceneFormatError(f"{k}: expected shape {shp}, got {a[k].shape}")
    if a["app"].shape[:2] != (n, frames):
        raise SceneFormatError(f"app: leading shape {a['app'].shape[:2]} != {(n, frames)}")
    hw = a["depth"].shape[1:]
    for k in ("depth", "semantics", "instances"):
        if a[k].shape != (frames,) + hw:
            raise SceneFormatError(f"{k}: expected shape {(frames,) + hw}, got {a[k].shape}")
    if T < 1 or F < 1:
        raise SceneFormatError(f"need T >= 1 and F >= 1, got T={T}, F={F}")
    if n and not a["presence"][:, :T].any(axis=1).all():
        raise SceneFormatError("every agent must be present in at least one input frame")


def scene_from_dict(d):
    if not isinstance(d, dict) or d.get("format") != SCENE_FORMAT:
        raise SceneFormatError(f"not a {SCENE_FORMAT} file")
    d = upgrade_scene_dict(d)
    missing = [k for k in ("T", "F", "c_bg", "c_things", "meta", *_ARRAYS) if k not in d]
    if missing:
        raise SceneFormatError(f"missing fields: {missing}")
    arrays = {name: _decode(name, d[name]) for name in _ARRAYS}
    T, F = int(d["T"]), int(d["F"])
    _check_schema(arrays, T, F)
    return SceneSequence(T, F, c_bg=int(d["c_bg"]), c_things=int(d["c_things"]), meta=dict(d["meta"]),
                         **arrays)


def load_scene(path):
    with open(path) as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{path}: truncated or malformed scene file ({e.msg} at char {e.pos})") from None
    return scene_from_dict(d)


def scenes_equal(a: SceneSequence, b: SceneSequence):
    if (a.T, a.F, a.c_bg, a.c_things, a.meta) != (b.T, b.F, b.c_bg, b.c_things, b.meta):
        return False
    return all(np.array_equal(getattr(a, k), getattr(b, k)) and getattr(a, k).dtype == getattr(b, k).dtype
               for k in _ARRAYS)


# ----------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = "psfcast-checkpoint 1"


def save_checkpoint(path, cfg: RunConfig, norm: Normalizer, params):
    """``params`` maps dotted names to ``ParamTensor``; order is preserved."""
    lines = [CKPT_MAGIC, "config " + json.dumps(asdict(cfg)), "normalizer " + json.dumps(norm.to_dict())]
    for name, p in params.items():
        shape = "x".join(str(s) for s in p.data.shape) or "scalar"
        lines.append(f"param {name} {shape}")
        lines.append(" ".join(float(v).hex() for v in p.data.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Returns ``(cfg, normalizer, {name: ndarray})``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (expected header {CKPT_MAGIC!r})")
    try:
        cfg_d = json.loads(lines[1].removeprefix("config "))
        cfg_d["head_hidden"] = tuple(cfg_d["head_hidden"])
        cfg = RunConfig(**cfg_d)
        norm = Normalizer.from_dict(json.loads(lines[2].removeprefix("normalizer ")))
    except (IndexError, json.JSONDecodeError, TypeError, KeyError) as e:
        raise CheckpointError(f"{path}: bad checkpoint preamble ({e})") from None
    values = {}
    body = lines[3:]
    if len(body) % 2:
        raise CheckpointError(f"{path}: truncated checkpoint")
    for head, data in zip(body[::2], body[1::2]):
        parts = head.split()
        if len(parts) != 3 or parts[0] != "param":
            raise CheckpointError(f"{path}: bad parameter header {head!r}")
        shape = () if parts[2] == "scalar" else tuple(int(s) for s in parts[2].split("x"))
        vals = [float.fromhex(v) for v in data.split()]
        if len(vals) != int(np.prod(shape)):
            raise CheckpointError(f"{path}: {parts[1]} has {len(vals)} values for shape {shape}")
        values[parts[1]] = np.array(vals).reshape(shape)
    return cfg, norm, values


def assign_params(params, values, strict=True):
    """Copy ``values`` into the matching ``ParamTensor`` objects."""
    if strict and set(params) != set(values):
        miss = sorted(set(params) - set(values))
        extra = sorted(set(values) - set(params))
        raise CheckpointError(f"parameter names differ (missing {miss[:5]}, unexpected {extra[:5]})")
    for name, p in params.items():
        v = values[name]
        if v.shape != p.data.shape:
            raise CheckpointError(f"{name}: checkpoint shape {v.shape} != model shape {p.data.shape}")
        p.data[...] = v
