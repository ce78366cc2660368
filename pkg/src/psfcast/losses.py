"""Training objectives.

Sign convention: the presence and background-refinement objectives are
written as log-likelihood sums; here they are negated so that every value is
a loss to minimise (>= 0).
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import linalg as L
from .linalg import ShapeError, Tensor, as_tensor

LAMBDAS = {"loc_box": 1.0, "loc_depth": 10.0, "loc_iou": 100.0,
           "presence": 10.0, "appearance": 10.0, "velocity": 1.0}

IOU_SIGNS = ("as_written", "negative", "one_minus")


@dataclass
class LossBreakdown:
    loc: float = 0.0
    presence: float = 0.0
    appearance: float = 0.0
    velocity: float = 0.0
    total_fg: float = 0.0
    bg_refine: float = 0.0
    refine_select: float = 0.0
    refine_bias: float = 0.0

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return [getattr(self, n) for n in self.field_names()]


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def smooth_l1_elem(a, b):
    diff = L.sub(a, b)
    ad = np.abs(diff.data)
    return L.where(ad < 1.0, L.mul(L.square(diff), 0.5), L.sub(L.absolute(diff), 0.5))


def smooth_l1(a, b):
    """Sum over elements of 0.5 d^2 (|d| < 1) or |d| - 0.5 (otherwise)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "smooth_l1")
    return L.tsum(smooth_l1_elem(a, b))


def box_iou(a, b):
    """IoU of ``[x0, y0, x1, y1]`` boxes along the last axis; 0 for empty unions."""
    a, b = as_tensor(a), as_tensor(b)
    ix0 = L.maximum(a[..., 0], b[..., 0])
    iy0 = L.maximum(a[..., 1], b[..., 1])
    ix1 = L.minimum(a[..., 2], b[..., 2])
    iy1 = L.minimum(a[..., 3], b[..., 3])
    iw = L.relu(L.sub(ix1, ix0))
    ih = L.relu(L.sub(iy1, iy0))
    inter = L.mul(iw, ih)
    area_a = L.mul(L.sub(a[..., 2], a[..., 0]), L.sub(a[..., 3], a[..., 1]))
    area_b = L.mul(L.sub(b[..., 2], b[..., 0]), L.sub(b[..., 3], b[..., 1]))
    union = L.sub(L.add(area_a, area_b), inter)
    ok = union.data > 0
    safe = L.where(ok, union, 1.0)
    return L.where(ok, L.div(inter, safe), 0.0)


def _masked_mean(per_pair, mask):
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum()
    if n == 0:
        return Tensor(0.0)
    return L.mul(L.tsum(L.mul(per_pair, mask)), 1.0 / n)


def loc_loss(pred, target, presence, lambdas=LAMBDAS, iou_sign="as_written"):
    """Presence-masked mean of box SmoothL1, depth SmoothL1 and the IoU term.

    ``pred`` and ``target`` are ``(..., 5)`` rows ``[x0, y0, x1, y1, d]``.
    ``iou_sign="as_written"`` adds ``+lambda * IoU``; ``"negative"`` subtracts
    it and ``"one_minus"`` uses ``lambda * (1 - IoU)``.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape(pred, target, "loc_loss")
    box = L.tsum(smooth_l1_elem(pred[..., :4], target[..., :4]), axis=-1)
    depth = smooth_l1_elem(pred[..., 4], target[..., 4])
    iou = box_iou(pred[..., :4], target[..., :4])
    if iou_sign == "as_written":
        iou_term = L.mul(iou, lambdas["loc_iou"])
    elif iou_sign == "negative":
        iou_term = L.mul(iou, -lambdas["loc_iou"])
    elif iou_sign == "one_minus":
        iou_term = L.mul(L.sub(1.0, iou), lambdas["loc_iou"])
    else:
        raise ValueError(f"iou_sign must be one of {IOU_SIGNS}, got {iou_sign!r}")
    per_pair = L.add(L.add(L.mul(box, lambdas["loc_box"]), L.mul(depth, lambdas["loc_depth"])), iou_term)
    return _masked_mean(per_pair, presence)


def presence_loss(logits, presence, lam=LAMBDAS["presence"]):
    """Binary cross-entropy over ``(N, F)`` logits, scaled by ``lam / (N F)``."""
    logits = as_tensor(logits)
    p = np.asarray(presence, dtype=np.float64)
    _same_shape(logits, Tensor(p), "presence_loss")
    if logits.data.size == 0:
        return Tensor(0.0)
    ll = L.add(L.mul(L.log_sigmoid(logits), p), L.mul(L.log_sigmoid(L.mul(logits, -1.0)), 1.0 - p))
    return L.mul(L.tsum(ll), -lam / logits.data.size)


def appearance_loss(r_hat, r_star, presence, lam=LAMBDAS["appearance"]):
    """Presence-masked mean squared feature error; ``r`` is ``(N, F, *feature)``."""
    r_hat, r_star = as_tensor(r_hat), as_tensor(r_star)
    _same_shape(r_hat, r_star, "appearance_loss")
    p = np.asarray(presence, dtype=np.float64)
    J = int(np.prod(r_hat.shape[p.ndim:]))
    n = p.sum() * J
    if n == 0:
        return Tensor(0.0)
    sq = L.square(L.sub(r_hat, r_star))
    w = p.reshape(p.shape + (1,) * (r_hat.ndim - p.ndim))
    return L.mul(L.tsum(L.mul(sq, w)), lam / n)


def velocity_targets(x_star):
    """``v*_t = x*_{t+1} - x*_t`` on the box coordinates; ``x_star`` is ``(N, T+1, >=4)``."""
    x = np.asarray(x_star, dtype=np.float64)
    return x[:, 1:, :4] - x[:, :-1, :4]


def velocity_loss(v_hat, x_star, presence, lam=LAMBDAS["velocity"]):
    """SmoothL1 between encoder velocities ``(N, T, 4)`` and finite-difference targets.

    ``x_star`` and ``presence`` cover ``T + 1`` frames; pair ``t`` counts only
    when the instance is present at both ``t`` and ``t + 1``.
    """
    v_hat = as_tensor(v_hat)
    p = np.asarray(presence, dtype=np.float64)
    target = Tensor(velocity_targets(x_star))
    _same_shape(v_hat, target, "velocity_loss")
    both = p[:, :-1] * p[:, 1:]
    per_pair = L.tsum(smooth_l1_elem(v_hat, target), axis=-1)
    return L.mul(_masked_mean(per_pair, both), lam)


def bg_refine_loss(prob_map, target, bg_mask, log_input=False):
    """Mean over background pixels of ``-log p(correct class)``.

    ``prob_map`` is ``(C, H, W)``; pass log-probabilities with ``log_input``.
    """
    prob_map = as_tensor(prob_map)
    target = np.asarray(target, dtype=int)
    mask = np.asarray(bg_mask, dtype=bool)
    n = mask.sum()
    if n == 0:
        return Tensor(0.0)
    rows, cols = np.nonzero(mask)
    picked = L.take(prob_map, (target[rows, cols], rows, cols))
    logp = picked if log_input else L.log(picked)
    return L.mul(L.tsum(logp), -1.0 / n)


def refinement_loss(scores, target, bias_map, log_domain=False):
    """Selection cross-entropy and depth-bias penalty.

    ``scores`` is ``(N+1, H, W)`` non-negative selection scores; each pixel's
    channels are normalised to a distribution before the cross-entropy.
    With ``log_domain`` the scores are log-scores (normalised by
    log-softmax). Returns ``(select, bias)`` where ``bias`` is the mean
    squared bias.
    """
    scores = as_tensor(scores)
    if log_domain:
        logp = L.log_softmax(scores, axis=0)
    else:
        logp = L.log(L.div(scores, L.tsum(scores, axis=0, keepdims=True)))
    target = np.asarray(target, dtype=int)
    H, W = target.shape
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    picked = L.take(logp, (target.ravel(), rr.ravel(), cc.ravel()))
    select = L.mul(L.tsum(picked), -1.0 / (H * W))
    bias = L.mean(L.square(as_tensor(bias_map)))
    return select, bias
