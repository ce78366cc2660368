"""Analytic-vs-finite-difference gradient checks shared by the CLI and tests.

Each check evaluates a scalar objective, back-propagates once, then probes
inputs and a sample of parameter entries with central differences. The
reported error is the norm-based relative error over all probed entries.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import attention as A
from .. import linalg as L
from ..linalg import Tensor, XorShift64, finite_diff_grad, rel_error
from ..losses import (IOU_SIGNS, appearance_loss, bg_refine_loss, loc_loss, presence_loss,
                      refinement_loss, velocity_loss)
from ..refine import RefineHead, mask_out

PER_OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol


def _sample(rng, size, k):
    if k is None or size <= k:
        return list(range(size))
    return sorted(int(i) for i in rng.permutation(size)[:k])


def check_function(f, inputs, params=None, rng=None, h=1e-6, per_param=None):
    """Relative error between analytic and central-difference gradients.

    ``f(**tensors)`` returns a scalar Tensor; ``inputs`` maps names to arrays
    that are differentiated; ``params`` maps names to ParamTensors used inside
    ``f`` (``per_param`` entries sampled from each).
    """
    rng = rng or XorShift64(0)
    params = params or {}
    for p in params.values():
        p.zero_grad()
    leaves = {k: Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in inputs.items()}
    f(**leaves).backward()
    ana, num = [], []
    for k, v in inputs.items():
        def g(x, k=k):
            args = {kk: Tensor(np.array(vv, dtype=float)) for kk, vv in inputs.items()}
            args[k] = Tensor(x)
            return float(f(**args).data)
        grad = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(leaves[k].data)
        num.append(finite_diff_grad(g, v, h).ravel())
        ana.append(grad.ravel())
    const = {k: Tensor(np.array(v, dtype=float)) for k, v in inputs.items()}
    for p in params.values():
        idx = _sample(rng, p.data.size, per_param)
        flat = p.data.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(**const).data)
            flat[i] = orig - h
            fm = float(f(**const).data)
            flat[i] = orig
            num.append(np.array([(fp - fm) / (2 * h)]))
        ana.append(p.grad.reshape(-1)[idx])
    return rel_error(np.concatenate(ana), np.concatenate(num))


# ----------------------------------------------------------------------------
# individual checks


def _rows_allowed(rng, m1, m2):
    allowed = rng.uniform(size=(m1, m2)) < 0.7
    allowed[np.arange(m1), rng.integers(0, m2, size=m1)] = True
    return allowed.astype(float)


def attention_check(variant, seed, m1=4, m2=5, d=6):
    rng = XorShift64(seed)
    params = A.AttentionParams(rng, variant, d)
    ids_q = rng.integers(0, 3, size=m1)
    ids_k = rng.integers(0, 3, size=m2)
    agent = A.agent_mask(ids_q, ids_k) if variant.startswith("agent_aware") else None
    allowed = _rows_allowed(rng, m1, m2)
    xs, xo = rng.normal(size=(m1, d)), rng.normal(size=(m2, d))
    w = rng.normal(size=(m1, d))

    def f(x_self, x_other):
        return L.tsum(L.mul(A.attend(params, x_self, x_other, allowed, agent), w))

    return check_function(f, {"x_self": xs, "x_other": xo}, params.params(), rng, per_param=6)


def _boxes(rng, n):
    x0 = rng.uniform(-1.0, 0.0, size=n)
    y0 = rng.uniform(-1.0, 0.0, size=n)
    return np.stack([x0, y0, x0 + rng.uniform(0.3, 1.0, size=n), y0 + rng.uniform(0.3, 1.0, size=n),
                     rng.uniform(-1.0, 1.0, size=n)], axis=-1)


def loc_check(seed, iou_sign):
    rng = XorShift64(seed)
    N, F = 3, 2
    target = _boxes(rng, N * F).reshape(N, F, 5)
    pred = target + rng.uniform(-0.15, 0.15, size=target.shape)
    pres = rng.uniform(size=(N, F)) < 0.7
    pres[0, 0] = True
    return check_function(lambda pred: loc_loss(pred, target, pres, iou_sign=iou_sign), {"pred": pred}, rng=rng)


def presence_check(seed):
    rng = XorShift64(seed)
    p = rng.uniform(size=(3, 4)) < 0.5
    return check_function(lambda z: presence_loss(z, p), {"z": rng.normal(size=(3, 4)) * 2}, rng=rng)


def appearance_check(seed):
    rng = XorShift64(seed)
    r_star = rng.normal(size=(2, 3, 2, 3, 3))
    p = rng.uniform(size=(2, 3)) < 0.6
    p[0, 0] = True
    return check_function(lambda r: appearance_loss(r, r_star, p), {"r": rng.normal(size=r_star.shape)},
                          rng=rng)


def velocity_check(seed):
    rng = XorShift64(seed)
    x_star = rng.normal(size=(3, 5, 5))
    p = rng.uniform(size=(3, 5)) < 0.8
    v0 = np.diff(x_star[..., :4], axis=1) + rng.uniform(-2.0, 2.0, size=(3, 4, 4))
    return check_function(lambda v: velocity_loss(v, x_star, p), {"v": v0}, rng=rng)


def bg_refine_check(seed):
    rng = XorShift64(seed)
    C, H, W = 3, 4, 5
    target = rng.integers(0, C, size=(H, W))
    mask = rng.uniform(size=(H, W)) < 0.6
    mask[0, 0] = True

    def f(z):
        return bg_refine_loss(L.exp(L.log_softmax(z, axis=0)), target, mask)

    return check_function(f, {"z": rng.normal(size=(C, H, W))}, rng=rng)


def refinement_check(seed):
    rng = XorShift64(seed)
    K, H, W = 2, 4, 5
    target = rng.integers(0, K + 1, size=(H, W))
    scores = rng.uniform(0.1, 2.0, size=(K + 1, H, W))
    return check_function(lambda s, b: L.add(*refinement_loss(s, target, b)),
                          {"s": scores, "b": rng.normal(size=(H, W))}, rng=rng)


def refine_end_to_end_check(seed):
    """Selection + bias loss back through value net and depth completion."""
    rng = XorShift64(seed)
    c_bg, H, W = 3, 6, 8
    head = RefineHead(rng, c_bg, width=4, depth_scale=10.0, temperature=4.0)
    d_tilde = rng.uniform(5.0, 15.0, size=(H, W))
    Q = (rng.uniform(size=(H, W)) < 0.7).astype(float)
    logits = rng.normal(size=(c_bg, H, W))
    masks = [mask_out([1.0, 1.0, 5.0, 4.0], rng.normal(size=(3, 3)) + 2.0, (H, W)),
             mask_out([3.0, 2.0, 7.0, 6.0], rng.normal(size=(3, 3)) + 2.0, (H, W))]
    depths = [float(rng.uniform(5.0, 15.0)), float(rng.uniform(5.0, 15.0))]
    target = rng.integers(0, 3, size=(H, W))

    def f():
        res = head(d_tilde, Q, logits, [Tensor(m.data) for m in masks], depths)
        sel, bias = refinement_loss(res.selection.log_scores, target, res.bias, log_domain=True)
        return L.add(sel, L.mul(bias, 1e-2))

    return check_function(f, {}, head.params(), rng, h=1e-6, per_param=4)


PER_OP = {
    "difference_attention": lambda s: attention_check("difference", s),
    "agent_aware_attention": lambda s: attention_check("agent_aware", s),
    "agent_aware_difference_attention": lambda s: attention_check("agent_aware_difference", s),
    **{f"loc_loss[{sign}]": (lambda s, sign=sign: loc_check(s, sign)) for sign in IOU_SIGNS},
    "presence_loss": presence_check,
    "appearance_loss": appearance_check,
    "velocity_loss": velocity_check,
    "bg_refine_loss": bg_refine_check,
    "refinement_loss": refinement_check,
}
END_TO_END = {"refinement_end_to_end": refine_end_to_end_check}


def run_suite(seeds=range(10), names=None):
    """Run every check for every seed; returns ``(results, seconds)``."""
    t0 = time.perf_counter()
    results = []
    for name, fn in list(PER_OP.items()) + list(END_TO_END.items()):
        if names and name not in names:
            continue
        tol = END_TO_END_TOL if name in END_TO_END else PER_OP_TOL
        for s in seeds:
            results.append(CheckResult(name, int(s), fn(int(s)), tol))
    return results, time.perf_counter() - t0


def summarize(results):
    worst = {}
    for r in results:
        if r.name not in worst or r.error > worst[r.name].error:
            worst[r.name] = r
    return worst
