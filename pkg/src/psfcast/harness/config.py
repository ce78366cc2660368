"""Run configuration and its ``key = value`` file format.

Blank lines and anything after ``#`` are ignored. Tuples are written as
comma-separated values, booleans as ``true``/``false``. Floats are written
with ``repr`` so a save/load round trip is exact.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..encdec import ModelConfig
from ..losses import IOU_SIGNS, LAMBDAS

# Full-scale schedule for reference: foreground 48000 steps with a drop at
# 36000, refinement 24000 with a drop at 18000, initial learning rate 1e-4.
# The desk defaults below keep the 3/4 drop point.


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # scenes
    n_agents: int = 3
    T: int = 4
    F: int = 3
    motion: str = "constant-velocity"
    height: int = 24
    width: int = 32
    gap_prob: float = 0.0
    depth_noise: float = 0.02
    d_max: float = 50.0
    # model
    d_e: int = 16
    d_tau: int = 16
    heads: int = 2
    ff_hidden: int = 32
    layers: int = 2
    c_app: int = 8
    c_e: int = 8
    app_h: int = 3
    app_w: int = 3
    head_hidden: tuple = (32, 16)
    loc_attention: str = "difference"
    proj_depth: int = 1
    final_ln: bool = True
    dropout: float = 0.0
    # losses
    lambda_loc_box: float = LAMBDAS["loc_box"]
    lambda_loc_depth: float = LAMBDAS["loc_depth"]
    lambda_loc_iou: float = LAMBDAS["loc_iou"]
    lambda_presence: float = LAMBDAS["presence"]
    lambda_appearance: float = LAMBDAS["appearance"]
    lambda_velocity: float = LAMBDAS["velocity"]
    iou_sign: str = "as_written"
    # stage 1 (foreground)
    steps: int = 500
    lr: float = 1e-3
    lr_drop_step: int = 375
    lr_drop_factor: float = 0.1
    # stage 2 (refinement + background refiner)
    refine_steps: int = 100
    refine_lr: float = 1e-2
    refine_drop_step: int = 75
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # refinement
    refine_width: int = 8
    depth_scale: float = 10.0
    d_fgmax: float = 1e4
    temperature: float = 1.0
    presence_threshold: float = 0.5
    # metrics
    pq_threshold: float = 0.5
    pq_strict: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_agents", "T", "F", "height", "width", "d_e", "d_tau", "heads", "ff_hidden",
                     "layers", "c_app", "c_e", "app_h", "app_w", "proj_depth", "refine_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("steps", "refine_steps", "lr_drop_step", "refine_drop_step"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr", "refine_lr", "lr_drop_factor", "d_max", "depth_scale", "d_fgmax",
                     "temperature", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1 or not 0 <= self.gap_prob < 1:
            raise ConfigError("dropout and gap_prob must lie in [0, 1)")
        if self.iou_sign not in IOU_SIGNS:
            raise ConfigError(f"iou_sign must be one of {IOU_SIGNS}, got {self.iou_sign!r}")
        if self.loc_attention not in ("difference", "dot"):
            raise ConfigError(f"loc_attention must be 'difference' or 'dot', got {self.loc_attention!r}")
        if self.d_e % self.heads or self.c_e % self.heads:
            raise ConfigError(f"d_e={self.d_e} and c_e={self.c_e} must be divisible by heads={self.heads}")

    def model_config(self):
        from .scene import THING_CLASSES
        return ModelConfig(d_e=self.d_e, d_tau=self.d_tau, heads=self.heads, ff_hidden=self.ff_hidden,
                           layers=self.layers, c_app=self.c_app, c_e=self.c_e,
                           app_hw=(self.app_h, self.app_w), n_classes=len(THING_CLASSES),
                           head_hidden=tuple(self.head_hidden), loc_attention=self.loc_attention,
                           proj_depth=self.proj_depth, final_ln=self.final_ln, dropout=self.dropout)

    def lambdas(self):
        return {k: getattr(self, "lambda_" + k) for k in LAMBDAS}

    def replace(self, **kw):
        d = asdict(self)
        unknown = set(kw) - set(d)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d.update(kw)
        return RunConfig(**d)

    # -- text format ---------------------------------------------------------

    def dumps(self):
        lines = ["# psfcast run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text, base=None):
        base = base or cls()
        kw = {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {no}: expected 'key = value', got {raw.strip()!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            kw[key] = parse_value(key, val)
        return base.replace(**kw)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path, base=None):
        with open(path) as fh:
            return cls.loads(fh.read(), base)


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_value(key, text):
    typ = FIELD_TYPES.get(key)
    if typ is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is tuple:
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None
