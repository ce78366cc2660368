"""Forecasting transformer: location and appearance branches.

Shapes (batched over agents from one or more scenes):

* ``x``        ``(N, T, 5)`` normalised ``[x0, y0, x1, y1, d]``
* ``presence`` ``(N, T)`` booleans
* ``app``      ``(N, T, C_app, h, w)`` appearance features
* ``odo``      ``(N, T + F, 5)`` normalised odometry of each agent's scene

Encoder entries exist only for present (agent, time) pairs and are ordered
agent-major, time-minor. Agents from different scenes never attend to each
other. Time indices are 1-based: inputs are ``1..T``, forecasts ``T+1..T+F``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import linalg as L
from .attention import ConfigError, MultiHead, agent_mask
from .layers import Conv2d, ConvNet, LayerNorm, Linear, MLP, Module
from .linalg import Tensor, XorShift64


@dataclass
class ModelConfig:
    d_e: int = 16
    d_tau: int = 16
    heads: int = 2
    ff_hidden: int = 32
    layers: int = 2
    c_app: int = 8
    c_e: int = 8
    app_hw: tuple = (3, 3)
    n_classes: int = 2
    head_hidden: tuple = (32, 16)
    loc_attention: str = "difference"   # "difference" | "dot" (both agent-aware)
    proj_depth: int = 1
    final_ln: bool = True
    dropout: float = 0.0

    @classmethod
    def full_scale(cls, **kw):
        """Full-size model (256-wide embeddings, 8 heads, 512 hidden, 256x14x14)."""
        base = dict(d_e=256, d_tau=256, heads=8, ff_hidden=512, c_app=256, c_e=256,
                    app_hw=(14, 14), head_hidden=(512, 256))
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def temporal_encoding(t, d_tau):
    """``sin(t / 1000^(k/d))`` at even ``k``, ``cos(t / 1000^((k-1)/d))`` at odd ``k``."""
    if d_tau % 2:
        raise ConfigError(f"temporal encoding width must be even, got {d_tau}")
    k = np.arange(d_tau)
    even = k - (k % 2)
    angle = np.asarray(t, dtype=np.float64)[..., None] / np.power(1000.0, even / d_tau)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def onehot(c, n):
    c = np.asarray(c, dtype=int)
    out = np.zeros(c.shape + (n,))
    np.put_along_axis(out, c[..., None], 1.0, axis=-1)
    return out


def dropout(x, p, rng):
    if p <= 0 or rng is None:
        return x
    keep = rng.random(x.shape) >= p
    return L.mul(x, keep / (1.0 - p))


class SequenceError(RuntimeError):
    pass


class PresenceError(ValueError):
    pass


# ----------------------------------------------------------------------------
# blocks


class FeedForward(Module):
    def __init__(self, rng, d, hidden, conv=False):
        if conv:
            self.net = ConvNet(rng, [d, hidden, d], [3, 3])
        else:
            self.net = MLP(rng, [d, hidden, d])

    def __call__(self, x):
        return self.net(x)


class EncoderBlock(Module):
    """Pre-LN: ``h += attn(LN(h))``; ``h += ff(LN(h))``."""

    def __init__(self, rng, variant, d, heads, hidden, conv=False, proj_depth=1):
        axis = -3 if conv else -1
        kind = "conv" if conv else "linear"
        self.ln1 = LayerNorm(d, axis)
        self.attn = MultiHead(rng, variant, d, heads, kind, proj_depth)
        self.ln2 = LayerNorm(d, axis)
        self.ff = FeedForward(rng, d, hidden, conv)

    def __call__(self, h, attend, agent, drop=(0.0, None)):
        a = self.ln1(h)
        h = L.add(h, dropout(self.attn(a, a, attend, agent), *drop))
        return L.add(h, dropout(self.ff(self.ln2(h)), *drop))


class DecoderBlock(Module):
    """Pre-LN: causal self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, rng, variant, d, heads, hidden, conv=False, proj_depth=1):
        axis = -3 if conv else -1
        kind = "conv" if conv else "linear"
        self.ln1 = LayerNorm(d, axis)
        self.self_attn = MultiHead(rng, variant, d, heads, kind, proj_depth)
        self.ln2 = LayerNorm(d, axis)
        self.cross_attn = MultiHead(rng, variant, d, heads, kind, proj_depth)
        self.ln3 = LayerNorm(d, axis)
        self.ff = FeedForward(rng, d, hidden, conv)

    def __call__(self, h, memory, self_masks, cross_masks, drop=(0.0, None)):
        a = self.ln1(h)
        h = L.add(h, dropout(self.self_attn(a, a, *self_masks), *drop))
        h = L.add(h, dropout(self.cross_attn(self.ln2(h), memory, *cross_masks), *drop))
        return L.add(h, dropout(self.ff(self.ln3(h)), *drop))


class Stack(Module):
    def __init__(self, blocks, d, conv, final_ln):
        self.blocks = blocks
        self.final = LayerNorm(d, -3 if conv else -1) if final_ln else None

    def run(self, h, *args, **kw):
        for b in self.blocks:
            h = b(h, *args, **kw)
        return self.final(h) if self.final is not None else h


# ----------------------------------------------------------------------------
# inputs / outputs


@dataclass
class ForecastInputs:
    x: np.ndarray
    presence: np.ndarray
    classes: np.ndarray
    app: np.ndarray
    odo: np.ndarray
    F: int
    scene: np.ndarray = None
    ids: np.ndarray = None
    x_future: np.ndarray = None          # (N, F, 5) targets, used for teacher forcing
    app_future: np.ndarray = None
    presence_future: np.ndarray = None

    def __post_init__(self):
        N = self.x.shape[0]
        if self.scene is None:
            self.scene = np.zeros(N, dtype=int)
        if self.ids is None:
            self.ids = np.arange(N)
        self.presence = np.asarray(self.presence, dtype=bool)

    @property
    def N(self):
        return self.x.shape[0]

    @property
    def T(self):
        return self.x.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return replace(self, x=self.x[idx], presence=self.presence[idx], classes=self.classes[idx],
                       app=self.app[idx], odo=self.odo[idx], scene=self.scene[idx], ids=self.ids[idx],
                       x_future=pick(self.x_future), app_future=pick(self.app_future),
                       presence_future=pick(self.presence_future))


def collate(batch):
    """Concatenate per-scene inputs; scene indices and agent ids are offset."""
    out, off = [], 0
    for s, b in enumerate(batch):
        out.append(replace(b, scene=np.full(b.N, s), ids=b.ids + off))
        off += int(b.ids.max()) + 1 if b.N else 0
    cat = lambda key: None if getattr(out[0], key) is None else np.concatenate([getattr(b, key) for b in out])  # noqa: E731
    Fs = {b.F for b in out}
    if len(Fs) != 1:
        raise SequenceError(f"scenes disagree on horizon: {sorted(Fs)}")
    return ForecastInputs(cat("x"), cat("presence"), cat("classes"), cat("app"), cat("odo"), Fs.pop(),
                          cat("scene"), cat("ids"), cat("x_future"), cat("app_future"),
                          cat("presence_future"))


@dataclass
class EncoderOutput:
    h_loc: Tensor            # (P, d_e)
    h_app: Tensor            # (P, C_e, h, w)
    agent: np.ndarray        # (P,) row into the batch
    time: np.ndarray         # (P,) 1-based
    v_hat: Tensor = None     # (P, 4)


@dataclass
class ForecastOutput:
    agents: np.ndarray       # batch rows that were forecast
    skipped: np.ndarray      # batch rows absent at T
    x_hat: Tensor            # (Nf, F, 5)
    p_logit: Tensor          # (Nf, F)
    r_hat: Tensor            # (Nf, F, C_app, h, w)
    v_hat_E: Tensor          # (N, T, 4), zeros where absent
    extras: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# the model


class Forecaster(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        rng = XorShift64(seed)
        self.cfg = cfg
        d, c = cfg.d_e, cfg.c_e
        variant = {"difference": "agent_aware_difference", "dot": "agent_aware"}.get(cfg.loc_attention)
        if variant is None:
            raise ConfigError(f"loc_attention must be 'difference' or 'dot', got {cfg.loc_attention!r}")
        # location embedding
        self.f_b = Linear(rng, 5 + cfg.n_classes, d)
        self.f_f = ConvNet(rng, [cfg.c_app, d, d], [3, 3], final_relu=True)
        self.f_e1 = Linear(rng, 2 * d + 5, d)
        self.f_e2 = Linear(rng, d + cfg.d_tau, d)
        # appearance embedding
        self.f_ae1 = Conv2d(rng, cfg.c_app, c, 3)
        self.f_ae2 = Conv2d(rng, c + cfg.d_tau, c, 1)
        # decoder embeddings
        self.f_d1 = Linear(rng, 5 + cfg.n_classes + 5, d)
        self.f_d2 = Linear(rng, d + cfg.d_tau, d)
        self.f_ad1 = Conv2d(rng, cfg.c_app, c, 3)
        self.f_ad2 = Conv2d(rng, c + cfg.d_tau, c, 1)
        n, pd = cfg.layers, cfg.proj_depth
        self.enc_loc = Stack([EncoderBlock(rng, variant, d, cfg.heads, cfg.ff_hidden, False, pd)
                              for _ in range(n)], d, False, cfg.final_ln)
        self.enc_app = Stack([EncoderBlock(rng, "dot", c, cfg.heads, cfg.ff_hidden, True, pd)
                              for _ in range(n)], c, True, cfg.final_ln)
        self.dec_loc = Stack([DecoderBlock(rng, variant, d, cfg.heads, cfg.ff_hidden, False, pd)
                              for _ in range(n)], d, False, cfg.final_ln)
        self.dec_app = Stack([DecoderBlock(rng, "agent_aware", c, cfg.heads, cfg.ff_hidden, True, pd)
                              for _ in range(n)], c, True, cfg.final_ln)
        hh = list(cfg.head_hidden)
        self.f_loc_out = MLP(rng, [d] + hh + [5])
        self.f_p_out = MLP(rng, [d] + hh + [1])
        self.f_vel = MLP(rng, [d] + hh + [4])
        self.f_app_out = Conv2d(rng, c, cfg.c_app, 3)
        self._drop_rng = np.random.default_rng(seed) if cfg.dropout > 0 else None

    def foreground_params(self):
        return self.params()

    @property
    def _drop(self):
        return (self.cfg.dropout, self._drop_rng)

    # -- embeddings ---------------------------------------------------------

    def embed_location(self, x, classes, app, odo, t):
        """Batched location embedding for ``P`` entries."""
        cfg = self.cfg
        x_p = self.f_b(Tensor(np.concatenate([x, onehot(classes, cfg.n_classes)], axis=-1)))
        r_p = L.mean(self.f_f(Tensor(app)), axis=(2, 3))
        e1 = self.f_e1(L.concat([x_p, r_p, Tensor(odo)], axis=-1))
        return self.f_e2(L.concat([e1, Tensor(temporal_encoding(t, cfg.d_tau))], axis=-1))

    def embed_appearance(self, app, t, first=None, second=None):
        """``second([first(r), tau broadcast over space])``; ``app`` may be a Tensor."""
        first, second = first or self.f_ae1, second or self.f_ae2
        h1 = first(app)
        P, _, hh, ww = h1.shape
        tau = temporal_encoding(t, self.cfg.d_tau)[:, :, None, None]
        tau = np.broadcast_to(tau, (P, self.cfg.d_tau, hh, ww))
        return second(L.concat([h1, Tensor(tau)], axis=1))

    def embed_decoder_location(self, x_prev, classes, odo, t):
        cfg = self.cfg
        x_prev = L.as_tensor(x_prev)
        inp = L.concat([x_prev, Tensor(onehot(classes, cfg.n_classes)), Tensor(odo)], axis=-1)
        return self.f_d2(L.concat([self.f_d1(inp), Tensor(temporal_encoding(t, cfg.d_tau))], axis=-1))

    # -- encoder ------------------------------------------------------------

    def encode(self, inp: ForecastInputs):
        ai, ti = np.nonzero(inp.presence)
        if ai.size == 0:
            raise PresenceError("encoder needs at least one present (agent, time) pair")
        t1 = ti + 1
        e_loc = self.embed_location(inp.x[ai, ti], inp.classes[ai], inp.app[ai, ti], inp.odo[ai, ti], t1)
        e_app = self.embed_appearance(Tensor(inp.app[ai, ti]), t1)
        ids, scene = inp.ids[ai], inp.scene[ai]
        agent = agent_mask(ids, ids)
        attend = agent_mask(scene, scene)
        h_loc = self.enc_loc.run(e_loc, attend, agent, drop=self._drop)
        h_app = self.enc_app.run(e_app, attend, None, drop=self._drop)
        v_hat = self.f_vel(h_loc)
        return EncoderOutput(h_loc, h_app, ai, t1, v_hat)

    def dense_velocity(self, inp, enc: EncoderOutput):
        """Scatter per-entry velocities into ``(N, T, 4)`` (zeros where absent)."""
        N, T = inp.presence.shape
        rows = np.full((N, T), enc.v_hat.shape[0], dtype=int)
        rows[enc.agent, enc.time - 1] = np.arange(enc.v_hat.shape[0])
        padded = L.concat([enc.v_hat, Tensor(np.zeros((1, 4)))], axis=0)
        return L.take(padded, rows)

    # -- decoder ------------------------------------------------------------

    def decode(self, inp: ForecastInputs, enc: EncoderOutput, agents, x_prev, r_prev, steps):
        """Run both decoder stacks over future positions ``1..steps``.

        ``x_prev`` is ``(Nf, steps, 5)`` and ``r_prev`` ``(Nf, steps, C, h, w)``:
        the location/appearance fed at each position (the previous step's
        value). Returns per-position decoder states, agent-major.
        """
        Nf = len(agents)
        T = inp.T
        if x_prev.shape[1] < steps:
            raise SequenceError(f"decoder needs {steps} previous steps, got {x_prev.shape[1]}")
        rows = np.repeat(agents, steps)
        pos = np.tile(np.arange(steps), Nf)
        t_abs = T + 1 + pos
        odo = inp.odo[rows, T + pos]
        xp = L.reshape(L.as_tensor(x_prev)[:, :steps], (Nf * steps, 5))
        e_loc = self.embed_decoder_location(xp, inp.classes[rows], odo, t_abs)
        rp = L.as_tensor(r_prev)[:, :steps]
        rp = L.reshape(rp, (Nf * steps,) + tuple(rp.shape[2:]))
        e_app = self.embed_appearance(rp, t_abs, self.f_ad1, self.f_ad2)

        ids_q, scene_q = inp.ids[rows], inp.scene[rows]
        ids_k, scene_k = inp.ids[enc.agent], inp.scene[enc.agent]
        same_scene = agent_mask(scene_q, scene_q) > 0
        causal = pos[None, :] <= pos[:, None]
        self_masks = ((same_scene & causal).astype(float), agent_mask(ids_q, ids_q))
        cross_masks = (agent_mask(scene_q, scene_k), agent_mask(ids_q, ids_k))
        h_loc = self.dec_loc.run(e_loc, enc.h_loc, self_masks, cross_masks, drop=self._drop)
        h_app = self.dec_app.run(e_app, enc.h_app, self_masks, cross_masks, drop=self._drop)
        return h_loc, h_app

    def forecast(self, inp: ForecastInputs, teacher_forcing=False):
        """Autoregressive forecast for agents present at the last input frame.

        Free-running mode re-runs the decoder over the growing prefix and keeps
        the newest position, so step ``t`` never sees inputs from later steps.
        Teacher forcing feeds ground-truth previous locations/appearances (the
        last fed value carries forward across gaps) in a single causal pass.
        """
        agents = np.flatnonzero(inp.presence[:, -1])
        skipped = np.flatnonzero(~inp.presence[:, -1])
        enc = self.encode(inp)
        v_dense = self.dense_velocity(inp, enc)
        F = inp.F
        Nf = len(agents)
        if Nf == 0:
            empty = Tensor(np.zeros((0, F, 5)))
            return ForecastOutput(agents, skipped, empty, Tensor(np.zeros((0, F))),
                                  Tensor(np.zeros((0, F, self.cfg.c_app) + tuple(inp.app.shape[-2:]))),
                                  v_dense, {"encoder": enc})
        x_last = inp.x[agents, -1]
        r_last = inp.app[agents, -1]
        if teacher_forcing:
            x_fed, r_fed = self._teacher_inputs(inp, agents)
            h_loc, h_app = self.decode(inp, enc, agents, x_fed, r_fed, F)
            delta = L.reshape(self.f_loc_out(h_loc), (Nf, F, 5))
            x_hat = L.add(delta, x_fed)
            p_logit = L.reshape(self.f_p_out(h_loc), (Nf, F))
            r_hat = L.reshape(self.f_app_out(h_app), (Nf, F) + tuple(r_last.shape[1:]))
            return ForecastOutput(agents, skipped, x_hat, p_logit, r_hat, v_dense, {"encoder": enc})

        xs, ps, rs = [], [], []
        x_prev = [Tensor(x_last[:, None])]
        r_prev = [Tensor(r_last[:, None])]
        for s in range(1, F + 1):
            xf = x_prev[0] if s == 1 else L.concat(x_prev, axis=1)
            rf = r_prev[0] if s == 1 else L.concat(r_prev, axis=1)
            h_loc, h_app = self.decode(inp, enc, agents, xf, rf, s)
            last = np.arange(Nf) * s + (s - 1)
            hl, ha = L.take(h_loc, last), L.take(h_app, last)
            x_new = L.add(self.f_loc_out(hl), L.reshape(x_prev[-1], (Nf, 5)))
            r_new = self.f_app_out(ha)
            xs.append(x_new)
            ps.append(L.reshape(self.f_p_out(hl), (Nf,)))
            rs.append(r_new)
            x_prev.append(L.reshape(x_new, (Nf, 1, 5)))
            r_prev.append(L.reshape(r_new, (Nf, 1) + tuple(r_new.shape[1:])))
        return ForecastOutput(agents, skipped, L.stack(xs, axis=1), L.stack(ps, axis=1),
                              L.stack(rs, axis=1), v_dense, {"encoder": enc})

    def _teacher_inputs(self, inp, agents):
        if inp.x_future is None or inp.app_future is None:
            raise SequenceError("teacher forcing needs future targets")
        F = inp.F
        x_seq = np.concatenate([inp.x[agents, -1:], inp.x_future[agents]], axis=1)
        r_seq = np.concatenate([inp.app[agents, -1:], inp.app_future[agents]], axis=1)
        pres = np.concatenate([np.ones((len(agents), 1), bool), inp.presence_future[agents]], axis=1)
        x_fed = np.empty((len(agents), F, 5))
        r_fed = np.empty((len(agents), F) + r_seq.shape[2:])
        for k in range(len(agents)):
            cur_x, cur_r = x_seq[k, 0], r_seq[k, 0]
            for s in range(F):
                if pres[k, s]:
                    cur_x, cur_r = x_seq[k, s], r_seq[k, s]
                x_fed[k, s], r_fed[k, s] = cur_x, cur_r
        return x_fed, r_fed


def velocity_head(model: Forecaster, h_loc):
    return model.f_vel(h_loc)


def autoregressive_forecast(model: Forecaster, inp: ForecastInputs, teacher_forcing=False):
    return model.forecast(inp, teacher_forcing)


def embed_location(model: Forecaster, x, presence, class_id, app, odo, t):
    """Single-entry location embedding; the entry must be present."""
    if not presence:
        raise PresenceError(f"no location embedding for an absent entry (t={t})")
    return L.reshape(model.embed_location(np.asarray(x)[None], np.array([class_id]),
                                          np.asarray(app)[None], np.asarray(odo)[None],
                                          np.array([t])), (model.cfg.d_e,))
