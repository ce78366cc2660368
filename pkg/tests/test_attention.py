import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psfcast import attention as A
from psfcast import linalg as L
from psfcast.harness.gradcheck import attention_check
from psfcast.linalg import Tensor, XorShift64

from oracles import attention_loop, random_attention_instance


def run(params, xs, xo, allowed=None, agent=None, heads=1):
    return A.attend(params, Tensor(xs), Tensor(xo), allowed, agent, heads).data


def zero_role(params, role):
    layer = getattr(params.proj, role).layers[0]
    layer.weight.data[...] = 0.0
    layer.bias.data[...] = 0.0


def copy_role(params, src, dst):
    a, b = getattr(src.proj, dst[0]).layers[0], getattr(params.proj, dst[1]).layers[0]
    b.weight.data[...] = a.weight.data
    b.bias.data[...] = a.bias.data


@pytest.mark.parametrize("variant", A.VARIANTS)
@pytest.mark.parametrize("masked", [False, True])
def test_matches_loop_oracle(variant, masked):
    for seed in range(25):
        params, xs, xo, allowed, agent = random_attention_instance(seed, variant)
        allowed = allowed if masked else None
        out = run(params, xs, xo, allowed, agent)
        np.testing.assert_allclose(out, attention_loop(params, xs, xo, allowed, agent), atol=1e-10, rtol=0)


def test_single_key_returns_its_value(rng):
    params = A.AttentionParams(XorShift64(0), "dot", 4)
    xs, xo = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    v = params.project("v", Tensor(xo)).data
    np.testing.assert_allclose(run(params, xs, xo), np.repeat(v, 3, axis=0), atol=1e-15)


def test_equal_keys_average_values(rng):
    params = A.AttentionParams(XorShift64(1), "dot", 4)
    k = params.proj.k.layers[0]
    k.weight.data[...] = 0.0                    # every key identical
    xs, xo = rng.normal(size=(2, 4)), rng.normal(size=(5, 4))
    v = params.project("v", Tensor(xo)).data
    np.testing.assert_allclose(run(params, xs, xo), np.tile(v.mean(axis=0), (2, 1)), atol=1e-14)


def test_difference_single_entry(rng):
    params = A.AttentionParams(XorShift64(2), "difference", 5)
    xs, xo = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
    expect = params.project("v_o", Tensor(xo)).data - params.project("v_s", Tensor(xs)).data
    np.testing.assert_allclose(run(params, xs, xo), expect, atol=1e-15)


@given(st.integers(0, 2**32), st.integers(1, 8), st.integers(1, 16))
def test_difference_zero_diagonal_when_q_equals_kb(seed, m, d):
    r = np.random.default_rng(seed)
    params = A.AttentionParams(XorShift64(seed), "difference", d)
    copy_role(params, params, ("q", "k_b"))
    x = r.normal(size=(m, d))
    q = params.project("q", Tensor(x))
    z = A.difference_scores(q, params.project("k_r", Tensor(x)), q).data
    assert np.all(np.diag(z) == 0.0)


def test_difference_degenerates_to_dot(rng):
    for seed in range(10):
        diff = A.AttentionParams(XorShift64(seed), "difference", 6)
        zero_role(diff, "v_s")
        zero_role(diff, "k_b")
        dot = A.AttentionParams(XorShift64(99), "dot", 6)
        for a, b in (("q", "q"), ("k_r", "k"), ("v_o", "v")):
            copy_role(dot, diff, (a, b))
        xs, xo = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
        np.testing.assert_allclose(run(diff, xs, xo), run(dot, xs, xo), atol=1e-12, rtol=0)


@pytest.mark.parametrize("base,aware", [("dot", "agent_aware"), ("difference", "agent_aware_difference")])
def test_agent_mask_selects_branch(rng, base, aware):
    params = A.AttentionParams(XorShift64(3), aware, 6)
    xs, xo = rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
    for fill, branch in ((1.0, "agent"), (0.0, "context")):
        ref = A.AttentionParams(XorShift64(4), base, 6)
        for role in ref.roles():
            src = role if role in ("v", "v_o", "v_s") else role + "_" + branch
            copy_role(ref, params, (src, role))
        out = run(params, xs, xo, agent=np.full((3, 4), fill))
        np.testing.assert_allclose(out, run(ref, xs, xo), atol=1e-14, rtol=0)


def test_aware_difference_single_entry(rng):
    params = A.AttentionParams(XorShift64(5), "agent_aware_difference", 4)
    xs, xo = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    expect = params.project("v_o", Tensor(xo)).data - params.project("v_s", Tensor(xs)).data
    np.testing.assert_allclose(run(params, xs, xo, agent=np.ones((1, 1))), expect, atol=1e-15)


@pytest.mark.parametrize("variant", A.VARIANTS)
def test_masked_keys_never_matter(rng, variant):
    params, xs, xo, allowed, agent = random_attention_instance(7, variant, max_m=6, d=8)
    allowed[:, 0] = False
    allowed[:, -1] |= allowed.sum(axis=1) == 0
    if allowed.shape[1] == 1:
        pytest.skip("needs two keys")
    a = run(params, xs, xo, allowed, agent)
    xo2 = xo.copy()
    xo2[0] = rng.normal(size=xo.shape[1]) * 100
    assert np.array_equal(a, run(params, xs, xo2, allowed, agent))


@pytest.mark.parametrize("variant", A.VARIANTS)
def test_agent_permutation_equivariance(rng, variant):
    params = A.AttentionParams(XorShift64(8), variant, 6)
    ids = np.array([0, 0, 1, 1, 2, 2])
    x = rng.normal(size=(6, 6))
    agent, _ = A.agent_mask(ids, ids), None
    perm = rng.permutation(6)
    a = run(params, x, x, agent=agent)
    b = run(params, x[perm], x[perm], agent=A.agent_mask(ids[perm], ids[perm]))
    np.testing.assert_allclose(b, a[perm], atol=1e-12, rtol=0)


def test_empty_row_raises():
    params = A.AttentionParams(XorShift64(0), "dot", 3)
    allowed = np.array([[1, 0], [0, 0]], bool)
    with pytest.raises(A.MaskError, match="row 1"):
        run(params, np.zeros((2, 3)), np.zeros((2, 3)), allowed)


def test_unknown_variant_and_missing_agent_mask():
    with pytest.raises(A.ConfigError):
        A.AttentionParams(XorShift64(0), "cosine", 3)
    params = A.AttentionParams(XorShift64(0), "agent_aware", 3)
    with pytest.raises(A.MaskError):
        run(params, np.zeros((1, 3)), np.zeros((1, 3)))


# -- masks ----------------------------------------------------------------------


def test_build_masks_cases():
    agent, allowed = A.build_masks(np.ones((1, 3), bool))
    assert np.all(agent == 1) and np.all(allowed == 1)
    agent, _ = A.build_masks(np.ones((2, 2), bool))
    np.testing.assert_array_equal(agent, np.kron(np.eye(2), np.ones((2, 2))))
    _, causal = A.build_masks(np.ones((1, 3), bool), "decoder-causal")
    np.testing.assert_array_equal(causal, np.tril(np.ones((3, 3))))
    _, allowed = A.build_masks(np.array([[True, False]]))
    np.testing.assert_array_equal(allowed, [[1, 0], [1, 0]])


# -- multi-head -----------------------------------------------------------------


def test_multihead_one_head_identity_output(rng):
    mh = A.MultiHead(XorShift64(0), "difference", 6, 1)
    mh.out.weight.data[...] = np.eye(6)
    mh.out.bias.data[...] = 0.0
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(mh(Tensor(x), Tensor(x)).data, run(mh.attn, x, x), atol=1e-15)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_multihead_shape(rng, heads):
    mh = A.MultiHead(XorShift64(0), "dot", 8, heads)
    assert mh(Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(3, 8)))).shape == (5, 8)


def test_two_heads_match_manual_split(rng):
    d, heads = 8, 2
    params = A.AttentionParams(XorShift64(6), "difference", d)
    xs, xo = rng.normal(size=(3, d)), rng.normal(size=(4, d))
    full = run(params, xs, xo, heads=heads)
    parts = []
    for h in range(heads):
        sl = slice(h * d // heads, (h + 1) * d // heads)
        proj = {r: L.take(params.project(r, Tensor(xs if r in A._SELF_ROLES else xo)), (Ellipsis, sl))
                for r in params.roles()}
        parts.append(A.attend_projected("difference", proj).data)
    np.testing.assert_allclose(full, np.concatenate(parts, axis=1), atol=1e-14)


def test_indivisible_heads():
    with pytest.raises(A.ConfigError):
        A.MultiHead(XorShift64(0), "dot", 6, 4)


def test_conv_attention_runs_per_position(rng):
    mh = A.MultiHead(XorShift64(1), "dot", 4, 2, kind="conv")
    x = rng.normal(size=(3, 4, 5, 6))
    assert mh(Tensor(x), Tensor(x)).shape == (3, 4, 5, 6)
    # per-position attention with 1x1 equivalence: token layout round trip
    tok = A.to_tokens(Tensor(x))
    assert tok.shape == (30, 3, 4)
    np.testing.assert_array_equal(A.from_tokens(tok, (5, 6)).data, x)


# -- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["difference", "agent_aware", "agent_aware_difference"])
@pytest.mark.parametrize("seed", range(10))
def test_gradients(variant, seed):
    assert attention_check(variant, seed) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_dot_and_multihead_gradients(seed):
    from psfcast.harness.gradcheck import check_function
    r = XorShift64(seed)
    mh = A.MultiHead(r, "agent_aware_difference", 4, 2)
    ids = np.array([0, 0, 1])
    w = np.random.default_rng(seed).normal(size=(3, 4))
    f = lambda x: L.tsum(L.mul(mh(x, x, None, A.agent_mask(ids, ids)), w))  # noqa: E731
    assert check_function(f, {"x": np.random.default_rng(seed).normal(size=(3, 4))}, mh.params(), r,
                          per_param=4) < 1e-4
