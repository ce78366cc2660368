import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psfcast import linalg as L
from psfcast.harness.gradcheck import refine_end_to_end_check
from psfcast.linalg import Tensor, XorShift64
from psfcast.refine import (D_FGMAX, DepthCompletion, KeptInstance, RefineHead, build_aggregate_depth,
                            depth_complete, mask_out, merge_panoptic, object_select)


def zero_head(net, head):
    for layer in getattr(net, head).layers:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0


def completion(seed=0, c_bg=3):
    return DepthCompletion(XorShift64(seed), c_bg, width=4)


@pytest.mark.parametrize("seed", range(5))
def test_full_coverage_zero_bias_is_passthrough(seed):
    r = np.random.default_rng(seed)
    net = completion(seed)
    zero_head(net, "bias")
    d = r.uniform(2, 30, size=(5, 6))
    d_hat, bias, _ = depth_complete(net, d, np.ones((5, 6)), r.dirichlet(np.ones(3), size=(5, 6)).transpose(2, 0, 1))
    assert np.all(bias.data == 0.0)
    assert np.array_equal(d_hat.data, d)


def test_no_coverage_zero_bias_is_fill(rng):
    net = completion()
    zero_head(net, "bias")
    d_hat, _, fill = depth_complete(net, rng.uniform(2, 30, size=(4, 4)), np.zeros((4, 4)),
                                    np.full((3, 4, 4), 1 / 3))
    assert np.array_equal(d_hat.data, fill.data)


def test_down_up_constant():
    x = Tensor(np.full((2, 6, 7), 1.25))
    down = L.resize_bilinear(x, 3, 3)
    np.testing.assert_allclose(L.resize_bilinear(down, 6, 7).data, 1.25, atol=1e-15)


# -- mask paste -----------------------------------------------------------------


def test_mask_out_zero_logits():
    m = mask_out([2.0, 1.0, 5.0, 3.0], np.zeros((3, 3)), (6, 8)).data
    assert np.all(m[1:3, 2:5] == 0.5)
    assert m.sum() == 0.5 * 6


def test_mask_out_full_frame_no_resampling(rng):
    logits = rng.normal(size=(4, 5))
    m = mask_out([0.0, 0.0, 5.0, 4.0], logits, (4, 5)).data
    np.testing.assert_allclose(m, 1 / (1 + np.exp(-logits)), atol=1e-15)


def test_mask_out_hand_bilinear():
    logits = np.array([[0.0, 3.0], [6.0, 9.0]])
    m = mask_out([0.0, 0.0, 4.0, 4.0], logits, (4, 4)).data
    # align-corners: row r and column c interpolate at r/3 and c/3
    expect = np.array([[6 * r / 3 + 3 * c / 3 for c in range(4)] for r in range(4)])
    np.testing.assert_allclose(m, 1 / (1 + np.exp(-expect)), atol=1e-15)


def test_mask_out_empty_box():
    assert np.all(mask_out([3.0, 3.0, 3.2, 7.0], np.ones((2, 2)), (8, 8)).data == 0)


# -- aggregate depth and selection ----------------------------------------------


def test_aggregate_depth_rules(rng):
    d_b = rng.uniform(1, 5, size=(3, 3))
    low = np.full((3, 3), 0.2)
    mixed = np.zeros((3, 3))
    mixed[1, 1] = 0.7
    D = build_aggregate_depth(d_b, [low, mixed], [4.0, 6.0]).data
    assert np.all(D[1] == D_FGMAX)
    assert D[2, 1, 1] == 6.0 and D[2, 0, 0] == D_FGMAX
    np.testing.assert_array_equal(build_aggregate_depth(d_b, [], []).data, d_b[None])


@pytest.mark.parametrize("seed", range(25))
def test_selection_picks_nearest_with_uniform_values(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 5))
    D = r.uniform(0, 100, size=(n + 1, 4, 5))
    win = r.integers(0, n + 1)
    D[win] = D.min(axis=0) - 20.0 - r.uniform(0, 5)
    sel = object_select(D, np.full_like(D, r.uniform(0.1, 3)))
    assert np.all(sel.argmax == win)


@given(st.integers(0, 2**32))
def test_selection_is_argmin_depth_for_constant_values(seed):
    r = np.random.default_rng(seed)
    D = r.uniform(0, 30, size=(4, 3, 3))
    sel = object_select(D, np.full_like(D, 2.0))
    np.testing.assert_array_equal(sel.argmax, np.argmin(D, axis=0))


def test_selection_hand_pixel():
    D = np.array([1.0, 2.0, 0.5]).reshape(3, 1, 1)
    V = np.array([1.0, 3.0, 0.5]).reshape(3, 1, 1)
    e = np.exp(-D[:, 0, 0])
    expect = e / e.sum() * V[:, 0, 0]
    sel = object_select(D, V)
    np.testing.assert_allclose(sel.scores.data[:, 0, 0], expect, rtol=1e-14)
    assert sel.argmax[0, 0] == 1
    assert np.all(object_select(np.ones((1, 2, 2)), np.ones((1, 2, 2))).argmax == 0)


# -- merge ----------------------------------------------------------------------


def test_merge_cases(rng):
    logits = rng.normal(size=(5, 4, 4))
    bg = np.argmax(logits, axis=0)
    pm = merge_panoptic(np.zeros((4, 4), int), logits, [], 5)
    np.testing.assert_array_equal(pm.class_id, bg)
    assert np.all(pm.instance_id == 0)
    pm = merge_panoptic(np.ones((4, 4), int), logits, [KeptInstance(1, 0)], 5)
    assert np.all(pm.instance_id == 6) and np.all(pm.class_id == 5)
    checker = np.indices((4, 4)).sum(axis=0) % 2
    pm = merge_panoptic(checker, logits, [KeptInstance(3, 1)], 5)
    np.testing.assert_array_equal(pm.instance_id, np.where(checker == 1, 8, 0))
    np.testing.assert_array_equal(pm.class_id, np.where(checker == 1, 6, bg))


@given(st.integers(0, 2**32))
def test_merge_ids_are_background_or_kept(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(0, 4))
    kept = [KeptInstance(int(i), int(r.integers(0, 2))) for i in r.permutation(6)[:n] + 1]
    P = r.integers(0, n + 1, size=(5, 5))
    pm = merge_panoptic(P, r.normal(size=(5, 5, 5)), kept, 5)
    assert set(np.unique(pm.instance_id)) <= {0} | {5 + k.index for k in kept}


# -- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_refinement_gradient(seed):
    assert refine_end_to_end_check(seed) < 1e-3


def test_head_runs_with_no_instances(rng):
    head = RefineHead(XorShift64(0), 3, width=4)
    res = head(rng.uniform(2, 9, size=(4, 5)), np.ones((4, 5)), rng.normal(size=(3, 4, 5)), [], [])
    assert res.D.shape == (1, 4, 5) and np.all(res.selection.argmax == 0)
