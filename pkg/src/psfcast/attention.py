"""Attention variants used by the forecasting transformer.

Four score rules share one value path:

* ``dot``: ``Z = Q K^T``, ``Y = softmax(Z / sqrt(d)) V``
* ``difference``: ``Z = Q K_R^T - 1 diag(K_B K_R^T)^T``,
  ``Y = softmax(Z / sqrt(d)) V_O - V_S``
* ``agent_aware`` / ``agent_aware_difference``: the same two rules evaluated
  with separate "agent" and "context" projections, blended per entry by a
  binary same-agent mask ``M``: ``Z = M * Z_agent + (1 - M) * Z_context``.

Inputs are either token matrices ``(M, d)`` with affine projections, or
feature maps ``(M, C, H, W)`` with 3x3 convolutional projections. In the
second case attention runs independently at every spatial position over the
``M`` entries (shape ``(H*W, M, C)`` internally).

Sequences are flattened agent-major, time-minor: entry ``i * T + t`` holds
agent ``i`` at time ``t``.
"""
from __future__ import annotations

import math

import numpy as np

from . import linalg as L
from .layers import ConvNet, Linear, MLP, Module

VARIANTS = ("dot", "difference", "agent_aware", "agent_aware_difference")

_ROLES = {
    "dot": ("q", "k", "v"),
    "difference": ("q", "k_r", "k_b", "v_o", "v_s"),
    "agent_aware": ("q_agent", "k_agent", "q_context", "k_context", "v"),
    "agent_aware_difference": ("q_agent", "k_r_agent", "k_b_agent",
                               "q_context", "k_r_context", "k_b_context", "v_o", "v_s"),
}


class MaskError(ValueError):
    """A query row has no key it is allowed to attend to."""


class ConfigError(ValueError):
    pass


class AttentionParams(Module):
    """Projection weights for one attention variant.

    ``kind="linear"`` uses affine maps (``depth`` > 1 gives an MLP with ReLU),
    ``kind="conv"`` uses 3x3 convolutions over feature maps.
    """

    def __init__(self, rng, variant, d, kind="linear", depth=1):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {variant!r}; choose from {VARIANTS}")
        self.variant = variant
        self.kind = kind
        self.d = d
        self.depth = depth
        self.proj = _Projections(rng, _ROLES[variant], d, kind, depth)

    def roles(self):
        return _ROLES[self.variant]

    def project(self, role, x):
        """Apply projection ``role`` to ``x`` and return token layout."""
        y = getattr(self.proj, role)(x)
        return to_tokens(y) if self.kind == "conv" else y


class _Projections(Module):
    def __init__(self, rng, roles, d, kind, depth):
        for role in roles:
            if kind == "conv":
                net = ConvNet(rng, [d] * (depth + 1), [3] * depth)
            else:
                net = MLP(rng, [d] * (depth + 1))
            setattr(self, role, net)


def to_tokens(y):
    """``(M, C, H, W)`` -> ``(H*W, M, C)``."""
    M, C, H, W = y.shape
    return L.transpose(L.reshape(y, (M, C, H * W)), (2, 0, 1))


def from_tokens(y, hw):
    """``(H*W, M, C)`` -> ``(M, C, H, W)``."""
    P, M, C = y.shape
    return L.reshape(L.transpose(y, (1, 2, 0)), (M, C) + tuple(hw))


def _check_rows(allowed):
    if allowed is None:
        return None
    allowed = np.asarray(allowed, dtype=bool)
    empty = np.flatnonzero(~allowed.any(axis=-1))
    if empty.size:
        raise MaskError(f"query row {int(empty[0])} has no allowed key (rows {empty.tolist()})")
    return allowed


def dot_scores(q, k):
    return L.matmul(q, L.swap_last(k))


def difference_scores(q, k_r, k_b):
    """``Q K_R^T - 1 diag(K_B K_R^T)^T``.

    The diagonal goes through the same matmul as the scores, so when
    ``Q = K_B`` the diagonal of ``Z`` is exactly zero.
    """
    m2 = k_r.shape[-2]
    full = L.matmul(k_b, L.swap_last(k_r))                     # (..., M2, M2)
    base = L.tsum(L.mul(full, np.eye(m2)), axis=-2)            # (..., M2)
    base = L.reshape(base, base.shape[:-1] + (1, base.shape[-1]))
    return L.sub(L.matmul(q, L.swap_last(k_r)), base)


def _blend(agent, z_agent, z_context):
    m = np.asarray(agent, dtype=np.float64)
    return L.add(L.mul(z_agent, m), L.mul(z_context, 1.0 - m))


def _scores(variant, p, agent):
    if variant == "dot":
        return dot_scores(p["q"], p["k"])
    if variant == "difference":
        return difference_scores(p["q"], p["k_r"], p["k_b"])
    if agent is None:
        raise MaskError(f"variant {variant!r} needs an agent mask")
    if variant == "agent_aware":
        return _blend(agent, dot_scores(p["q_agent"], p["k_agent"]),
                      dot_scores(p["q_context"], p["k_context"]))
    return _blend(agent,
                  difference_scores(p["q_agent"], p["k_r_agent"], p["k_b_agent"]),
                  difference_scores(p["q_context"], p["k_r_context"], p["k_b_context"]))


_SELF_ROLES = {"q", "q_agent", "q_context", "v_s"}


def project_all(params: AttentionParams, x_self, x_other):
    """Every projection of the variant, full width, in token layout.

    Single-layer projections that read the same input are evaluated as one
    fused matmul/convolution over concatenated weights.
    """
    groups = {}
    for role in params.roles():
        src = x_self if role in _SELF_ROLES else x_other
        groups.setdefault(id(src), (src, []))[1].append(role)
    if params.depth != 1:
        return {role: params.project(role, src) for src, roles in groups.values() for role in roles}
    out = {}
    for src, roles in groups.values():
        layers = [getattr(params.proj, r).layers[0] for r in roles]
        if params.kind == "conv":
            w = L.concat([l.weight for l in layers], axis=0)
            y = to_tokens(L.conv2d(src, w, L.concat([l.bias for l in layers], axis=0)))
        else:
            w = L.concat([l.weight for l in layers], axis=1)
            y = L.add(L.matmul(src, w), L.concat([l.bias for l in layers], axis=0))
        d = params.d
        for i, role in enumerate(roles):
            out[role] = L.take(y, (Ellipsis, slice(i * d, (i + 1) * d)))
    return out


def attend_projected(variant, proj, allowed=None, agent=None):
    """Score, normalise and aggregate already-projected inputs.

    The softmax scale uses the projected width (the head width under
    multi-head splitting).
    """
    allowed = _check_rows(allowed)
    width = next(iter(proj.values())).shape[-1]
    z = _scores(variant, proj, agent)
    a = L.softmax_rows(L.mul(z, 1.0 / math.sqrt(width)), allowed)
    if variant in ("dot", "agent_aware"):
        return L.matmul(a, proj["v"])
    return L.sub(L.matmul(a, proj["v_o"]), proj["v_s"])


def attend(params: AttentionParams, x_self, x_other, attend=None, agent=None, heads=1):
    """Run ``params.variant`` over ``heads`` equal slices of the projections and
    concatenate the per-head outputs (token layout).

    ``attend`` marks allowed (query, key) pairs; ``agent`` is the same-agent
    mask used by the agent-aware variants.
    """
    allowed = _check_rows(attend)
    proj = project_all(params, x_self, x_other)
    if heads == 1:
        return attend_projected(params.variant, proj, allowed, agent)
    y = attend_projected(params.variant, {r: split_heads(v, heads) for r, v in proj.items()},
                         allowed, agent)
    return merge_heads(y)


def split_heads(x, heads):
    """``(..., M, d)`` -> ``(..., heads, M, d / heads)``; head ``h`` owns columns
    ``h*d/heads`` to ``(h+1)*d/heads``."""
    *lead, M, d = x.shape
    y = L.reshape(x, tuple(lead) + (M, heads, d // heads))
    n = len(lead)
    return L.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(y):
    *lead, H, M, dh = y.shape
    n = len(lead)
    y = L.transpose(y, tuple(range(n)) + (n + 1, n, n + 2))
    return L.reshape(y, tuple(lead) + (M, H * dh))


def dot_attention(x_self, x_other, params, attend_mask=None):
    _expect(params, "dot")
    return attend(params, x_self, x_other, attend_mask)


def difference_attention(x_self, x_other, params, attend_mask=None):
    _expect(params, "difference")
    return attend(params, x_self, x_other, attend_mask)


def agent_aware_attention(x_self, x_other, params, agent_mask, attend_mask=None):
    _expect(params, "agent_aware")
    return attend(params, x_self, x_other, attend_mask, agent_mask)


def agent_aware_difference_attention(x_self, x_other, params, agent_mask, attend_mask=None):
    _expect(params, "agent_aware_difference")
    return attend(params, x_self, x_other, attend_mask, agent_mask)


def _expect(params, variant):
    if params.variant != variant:
        raise ConfigError(f"expected {variant!r} parameters, got {params.variant!r}")


class MultiHead(Module):
    """Head-split attention followed by an output projection."""

    def __init__(self, rng, variant, d, heads, kind="linear", depth=1):
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.attn = AttentionParams(rng, variant, d, kind, depth)
        self.out = Linear(rng, d, d) if kind == "linear" else ConvNet(rng, [d, d], [3])

    @property
    def variant(self):
        return self.attn.variant

    def __call__(self, x_self, x_other, attend_mask=None, agent_mask=None):
        return multi_head(self, x_self, x_other, attend_mask, agent_mask)


def multi_head(mh: MultiHead, x_self, x_other, attend_mask=None, agent_mask=None):
    """Split the projected width into ``mh.heads`` slices, attend per slice,
    concatenate and apply the output projection."""
    y = attend(mh.attn, x_self, x_other, attend_mask, agent_mask, mh.heads)
    if mh.attn.kind == "conv":
        y = from_tokens(y, x_self.shape[-2:])
    return mh.out(y)


# ----------------------------------------------------------------------------
# masks


def agent_mask(ids_q, ids_k):
    """``M[i, j] = 1`` iff query ``i`` and key ``j`` belong to the same agent."""
    return (np.asarray(ids_q)[:, None] == np.asarray(ids_k)[None, :]).astype(np.float64)


def build_masks(presence, mode="encoder", ids=None):
    """Masks for self-attention over an ``N x T`` (agent, time) grid.

    Returns ``(agent_mask, attend_mask)`` over the ``N*T`` flattened entries
    (agent-major, time-minor). Absent keys are never allowed; in
    ``"decoder-causal"`` mode keys from later time steps are also forbidden.
    Rows belonging to absent queries may be all-zero and must be dropped by
    the caller.
    """
    presence = np.asarray(presence, dtype=bool)
    N, T = presence.shape
    ids = np.arange(N) if ids is None else np.asarray(ids)
    flat_ids = np.repeat(ids, T)
    times = np.tile(np.arange(T), N)
    agent = agent_mask(flat_ids, flat_ids)
    allowed = np.broadcast_to(presence.reshape(-1)[None, :], (N * T, N * T)).copy()
    if mode == "decoder-causal":
        allowed &= times[None, :] <= times[:, None]
    elif mode != "encoder":
        raise ConfigError(f"unknown mask mode {mode!r}")
    return agent, allowed.astype(np.float64)
