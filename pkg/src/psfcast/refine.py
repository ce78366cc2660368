"""Depth-aware prediction refinement.

Per-pixel channel tensors are stored channel-first, ``(N+1, H, W)``: channel
0 is the background, channel ``k >= 1`` the ``k``-th kept instance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg as L
from .layers import Conv2d, ConvNet, Module
from .linalg import Tensor, as_tensor

D_FGMAX = 1e4


class DepthCompletion(Module):
    """Completes and denoises reprojected background depth.

    ``d1 = conv3x3([d, Q, m_prob])``; ``d2 = d1 + up(convnet(down(d1)))``;
    fill and bias heads are 3x3 conv, ReLU, 1x1 conv. Depths enter the
    network divided by ``depth_scale`` and both heads are scaled back up.
    """

    def __init__(self, rng, c_bg, width=8, depth_scale=10.0):
        self.dc1 = Conv2d(rng, 2 + c_bg, width, 3)
        self.dc2 = ConvNet(rng, [width, width, width], [3, 3])
        self.fill = ConvNet(rng, [width, width, 1], [3, 1])
        self.bias = ConvNet(rng, [width, width, 1], [3, 1])
        self.depth_scale = depth_scale

    def __call__(self, d_tilde, Q, m_prob):
        d_tilde = as_tensor(d_tilde)
        Q = np.asarray(Q, dtype=np.float64)
        H, W = Q.shape
        x = L.concat([L.reshape(L.mul(d_tilde, 1.0 / self.depth_scale), (1, H, W)),
                      Tensor(Q[None]), as_tensor(m_prob)], axis=0)
        d1 = self.dc1(x)
        h2, w2 = max(H // 2, 1), max(W // 2, 1)
        low = self.dc2(L.resize_bilinear(d1, h2, w2))
        d2 = L.add(d1, L.resize_bilinear(low, H, W))
        fill = L.mul(L.reshape(self.fill(d2), (H, W)), self.depth_scale)
        bias = L.mul(L.reshape(self.bias(d2), (H, W)), self.depth_scale)
        return fill, bias


def depth_complete(net: DepthCompletion, d_tilde, Q, m_prob):
    """Returns ``(d_hat, bias, fill)`` with ``d_hat = Q d + (1 - Q) fill + bias``."""
    fill, bias = net(d_tilde, Q, m_prob)
    Q = np.asarray(Q, dtype=np.float64)
    d_hat = L.add(L.add(L.mul(as_tensor(d_tilde), Q), L.mul(fill, 1.0 - Q)), bias)
    return d_hat, bias, fill


def box_pixels(box, frame_hw):
    """Integer ``(r0, r1, c0, c1)`` half-open pixel span of a clamped box."""
    h, w = frame_hw
    x0, y0, x1, y1 = (float(v) for v in box)
    c0, c1 = int(np.clip(np.floor(x0 + 0.5), 0, w)), int(np.clip(np.floor(x1 + 0.5), 0, w))
    r0, r1 = int(np.clip(np.floor(y0 + 0.5), 0, h)), int(np.clip(np.floor(y1 + 0.5), 0, h))
    return r0, r1, c0, c1


def mask_out(box, mask_logits, frame_hw):
    """Paste ``sigmoid(logits)`` resized (align-corners bilinear) into ``box``.

    ``box`` is ``[x0, y0, x1, y1]`` in pixels; pixels outside it are 0.
    """
    h, w = frame_hw
    r0, r1, c0, c1 = box_pixels(box, frame_hw)
    if r1 <= r0 or c1 <= c0:
        return Tensor(np.zeros((h, w)))
    patch = L.sigmoid(L.resize_bilinear(as_tensor(mask_logits), r1 - r0, c1 - c0))
    # zero-pad by left/right multiplication with selection matrices
    rows = np.zeros((h, r1 - r0))
    rows[np.arange(r0, r1), np.arange(r1 - r0)] = 1.0
    cols = np.zeros((c1 - c0, w))
    cols[np.arange(c1 - c0), np.arange(c0, c1)] = 1.0
    return L.matmul(L.matmul(Tensor(rows), patch), Tensor(cols))


def build_aggregate_depth(d_hat_B, masks, depths, d_fgmax=D_FGMAX):
    """Channel 0 is ``d_hat_B``; channel ``i`` is ``d_i`` where mask_i >= 0.5 else ``d_fgmax``."""
    d_hat_B = as_tensor(d_hat_B)
    H, W = d_hat_B.shape
    chans = [L.reshape(d_hat_B, (1, H, W))]
    for m, d in zip(masks, depths):
        on = np.asarray(m.data if isinstance(m, Tensor) else m) >= 0.5
        ch = L.where(on, L.mul(as_tensor(d), np.ones((H, W))), d_fgmax)
        chans.append(L.reshape(ch, (1, H, W)))
    return L.concat(chans, axis=0)


class ValueNet(Module):
    """Per-channel selection values ``V = exp(s)``.

    ``s_0 = conv(bg_logits)`` and ``s_i = conv([mask_i, bg_logits])`` with the
    instance convolution shared across instances, so any ``N`` is supported.
    """

    def __init__(self, rng, c_bg):
        self.bg = Conv2d(rng, c_bg, 1, 3)
        self.fg = Conv2d(rng, 1 + c_bg, 1, 3)

    def __call__(self, bg_logits, masks):
        bg_logits = as_tensor(bg_logits)
        H, W = bg_logits.shape[-2:]
        chans = [self.bg(bg_logits)]
        for m in masks:
            chans.append(self.fg(L.concat([L.reshape(as_tensor(m), (1, H, W)), bg_logits], axis=0)))
        return L.exp(L.concat(chans, axis=0))


@dataclass
class SelectionMap:
    scores: Tensor        # (N+1, H, W)
    log_scores: Tensor    # (N+1, H, W), log of ``scores``
    argmax: np.ndarray    # (H, W) in [0, N]


def object_select(D, V, temperature=1.0):
    """``P~ = softmax(-D / temperature) * V`` per pixel; ``P^ = argmax`` (lowest index on ties)."""
    D, V = as_tensor(D), as_tensor(V)
    neg = L.mul(D, -1.0 / temperature)
    logsm = L.log_softmax(neg, axis=0)
    scores = L.mul(L.exp(logsm), V)
    log_scores = L.add(logsm, L.log(V))
    return SelectionMap(scores, log_scores, np.argmax(scores.data, axis=0))


@dataclass
class PanopticMap:
    """Per-pixel class id and instance id (0 on background pixels)."""

    class_id: np.ndarray
    instance_id: np.ndarray

    @property
    def shape(self):
        return self.class_id.shape

    def combined(self):
        """Single label map: background class, or instance id on foreground pixels."""
        return np.where(self.instance_id > 0, self.instance_id, self.class_id)


@dataclass
class KeptInstance:
    index: int          # 1-based agent index
    thing_class: int    # in [0, C_things)


def merge_panoptic(P_hat, m_B_logits, kept, c_bg):
    """Background pixels take the argmax background class; pixels selecting
    channel ``k`` take instance id ``c_bg + kept[k-1].index`` and class
    ``c_bg + kept[k-1].thing_class``.
    """
    P_hat = np.asarray(P_hat, dtype=int)
    logits = np.asarray(m_B_logits.data if isinstance(m_B_logits, Tensor) else m_B_logits)
    cls = np.argmax(logits, axis=0).astype(int)
    inst = np.zeros_like(P_hat)
    for k, ki in enumerate(kept, start=1):
        sel = P_hat == k
        inst[sel] = c_bg + ki.index
        cls[sel] = c_bg + ki.thing_class
    return PanopticMap(cls, inst)


class BackgroundRefiner(Module):
    """Toy refiner: reprojected one-hot semantics, scaled depth and validity
    of every input frame -> conv3x3 -> ReLU -> conv3x3 -> class logits.
    """

    def __init__(self, rng, c_bg, n_frames, width=8, depth_scale=10.0):
        self.net = ConvNet(rng, [n_frames * (c_bg + 2), width, c_bg], [3, 3])
        self.c_bg = c_bg
        self.depth_scale = depth_scale

    def features(self, labels, depth, valid):
        T, H, W = labels.shape
        chans = []
        for t in range(T):
            onehot = np.zeros((self.c_bg, H, W))
            rr, cc = np.nonzero(valid[t])
            onehot[labels[t][rr, cc], rr, cc] = 1.0
            chans += [onehot, depth[t][None] / self.depth_scale, valid[t][None].astype(float)]
        return np.concatenate(chans, axis=0)

    def __call__(self, labels, depth, valid):
        return self.net(Tensor(self.features(labels, depth, valid)))


@dataclass
class RefineResult:
    d_hat: Tensor
    bias: Tensor
    fill: Tensor
    D: Tensor
    V: Tensor
    selection: SelectionMap
    masks: list = field(default_factory=list)


class RefineHead(Module):
    def __init__(self, rng, c_bg, width=8, depth_scale=10.0, d_fgmax=D_FGMAX, temperature=1.0):
        self.completion = DepthCompletion(rng, c_bg, width, depth_scale)
        self.values = ValueNet(rng, c_bg)
        self.d_fgmax = d_fgmax
        self.temperature = temperature

    def __call__(self, d_tilde, Q, bg_logits, masks, depths):
        bg_logits = as_tensor(bg_logits)
        m_prob = L.exp(L.log_softmax(bg_logits, axis=0))
        d_hat, bias, fill = depth_complete(self.completion, d_tilde, Q, m_prob)
        D = build_aggregate_depth(d_hat, masks, depths, self.d_fgmax)
        V = self.values(bg_logits, masks)
        sel = object_select(D, V, self.temperature)
        return RefineResult(d_hat, bias, fill, D, V, sel, list(masks))
