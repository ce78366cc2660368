"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops over scalars so that it
shares no vectorised code path with the package.
"""
import math

import numpy as np

from psfcast import attention as A


def projection(params, role, x):
    """Affine projection through plain numpy (single-layer linear params only)."""
    layer = getattr(params.proj, role).layers[0]
    return np.asarray(x) @ layer.weight.data + layer.bias.data


def dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def attention_loop(params, x_self, x_other, allowed=None, agent=None):
    variant = params.variant
    p = {r: projection(params, r, x_self if r in A._SELF_ROLES else x_other) for r in params.roles()}
    m1, m2 = len(x_self), len(x_other)
    d = params.d

    def score(i, j):
        if variant == "dot":
            return dot(p["q"][i], p["k"][j])
        if variant == "difference":
            return dot(p["q"][i], p["k_r"][j]) - dot(p["k_b"][j], p["k_r"][j])
        branch = "agent" if agent[i][j] else "context"
        if variant == "agent_aware":
            return dot(p["q_" + branch][i], p["k_" + branch][j])
        return (dot(p["q_" + branch][i], p["k_r_" + branch][j])
                - dot(p["k_b_" + branch][j], p["k_r_" + branch][j]))

    out = np.zeros((m1, d))
    for i in range(m1):
        keys = [j for j in range(m2) if allowed is None or allowed[i][j]]
        z = {j: score(i, j) / math.sqrt(d) for j in keys}
        top = max(z.values())
        w = {j: math.exp(z[j] - top) for j in keys}
        total = sum(w.values())
        for c in range(d):
            if variant in ("dot", "agent_aware"):
                out[i, c] = sum(w[j] / total * p["v"][j][c] for j in keys)
            else:
                out[i, c] = sum(w[j] / total * p["v_o"][j][c] for j in keys) - p["v_s"][i][c]
    return out


def zbuffer_groups(rows, cols, depth, labels, hw):
    """Per-pixel minimum by grouping points into a dict; first arrival wins ties."""
    best = {}
    for n, (r, c, d, lab) in enumerate(zip(rows, cols, depth, labels)):
        key = (int(r), int(c))
        if key not in best or d < best[key][0]:
            best[key] = (float(d), int(lab))
    h, w = hw
    out_l = np.full((h, w), -1, dtype=int)
    out_d = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    for (r, c), (d, lab) in best.items():
        out_l[r, c], out_d[r, c], valid[r, c] = lab, d, True
    return out_l, out_d, valid


def random_attention_instance(seed, variant, max_m=8, d=16):
    """Params and inputs for one randomised oracle comparison."""
    from psfcast.linalg import XorShift64
    r = np.random.default_rng(seed)
    m1, m2 = int(r.integers(1, max_m + 1)), int(r.integers(1, max_m + 1))
    params = A.AttentionParams(XorShift64(seed), variant, d)
    xs, xo = r.normal(size=(m1, d)), r.normal(size=(m2, d))
    allowed = r.uniform(size=(m1, m2)) < 0.7
    allowed[np.arange(m1), r.integers(0, m2, size=m1)] = True
    agent = A.agent_mask(r.integers(0, 3, size=m1), r.integers(0, 3, size=m2))
    return params, xs, xo, allowed, agent
