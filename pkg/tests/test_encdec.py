import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psfcast import linalg as L
from psfcast.encdec import (Forecaster, ModelConfig, PresenceError, SequenceError, collate, embed_location,
                            onehot, temporal_encoding, velocity_head)
from psfcast.harness.config import RunConfig
from psfcast.harness.gradcheck import check_function
from psfcast.harness.scene import Normalizer, forecast_inputs, generate_scene
from psfcast.harness.train import foreground_losses
from psfcast.linalg import Tensor, XorShift64

TINY = ModelConfig(d_e=8, d_tau=8, heads=2, ff_hidden=16, layers=2, c_app=4, c_e=4, head_hidden=(8,))


def inputs(seed, n=3, T=3, F=3, gap=0.3):
    s = generate_scene(seed, n_agents=n, T=T, F=F, c_app=4, render=False, gap_prob=gap)
    return forecast_inputs(s, Normalizer.fit([s]))


# -- temporal encoding ----------------------------------------------------------


def test_temporal_encoding_at_zero():
    np.testing.assert_array_equal(temporal_encoding(0, 6), [0, 1, 0, 1, 0, 1])


def test_temporal_encoding_hand_value():
    assert temporal_encoding(1, 4)[2] == pytest.approx(math.sin(1 / 1000 ** 0.5), abs=1e-15)
    assert temporal_encoding(1, 4)[3] == pytest.approx(math.cos(1 / 1000 ** 0.5), abs=1e-15)


@given(st.floats(0, 1e4), st.sampled_from([2, 4, 8, 16, 256]))
def test_temporal_encoding_pythagorean(t, d):
    tau = temporal_encoding(t, d)
    np.testing.assert_allclose(tau[0::2] ** 2 + tau[1::2] ** 2, 1.0, atol=1e-12)


def test_temporal_encoding_odd_width():
    with pytest.raises(ValueError):
        temporal_encoding(1, 5)


@given(st.integers(0, 6))
def test_onehot(c):
    v = onehot(c, 7)
    assert v.sum() == 1 and v[c] == 1


# -- embeddings -----------------------------------------------------------------


def test_location_embedding_width_and_absent():
    m = Forecaster(TINY, 0)
    e = embed_location(m, np.zeros(5), True, 1, np.zeros((4, 3, 3)), np.zeros(5), 2)
    assert e.shape == (TINY.d_e,)
    with pytest.raises(PresenceError):
        embed_location(m, np.zeros(5), False, 1, np.zeros((4, 3, 3)), np.zeros(5), 2)


def test_appearance_embedding_preserves_space_and_broadcasts_time(rng):
    m = Forecaster(TINY, 0)
    m.f_ae1.weight.data[...] = 0.0
    m.f_ae1.bias.data[...] = 0.0
    out = m.embed_appearance(Tensor(rng.normal(size=(2, 4, 3, 3))), np.array([1, 2])).data
    assert out.shape == (2, TINY.c_e, 3, 3)
    # with the first conv zeroed, only the broadcast temporal channels feed a 1x1 conv
    assert np.allclose(out, out[..., :1, :1])


def test_avgpool_of_constant_map():
    m = Forecaster(TINY, 0)
    for layer in m.f_f.layers:
        layer.weight.data[...] = 0.0
    m.f_f.layers[-1].bias.data[...] = np.arange(TINY.d_e) * 0.1
    pooled = L.mean(m.f_f(Tensor(np.ones((1, 4, 3, 3)))), axis=(2, 3)).data
    np.testing.assert_allclose(pooled[0], np.arange(TINY.d_e) * 0.1, atol=1e-15)


# -- encoder --------------------------------------------------------------------


def test_encoder_single_entry():
    inp = inputs(0, n=1, T=1, F=1)
    enc = Forecaster(TINY, 0).encode(inp)
    assert enc.h_loc.shape == (1, TINY.d_e)
    assert enc.h_app.shape == (1, TINY.c_e, 3, 3)
    assert enc.agent.tolist() == [0] and enc.time.tolist() == [1]


def test_encoder_needs_a_present_entry():
    inp = inputs(0, n=1, T=2, F=1)
    inp = replace(inp, presence=np.zeros_like(inp.presence))
    with pytest.raises(PresenceError):
        Forecaster(TINY, 0).encode(inp)


@pytest.mark.parametrize("seed", range(20))
def test_absent_inputs_never_matter(seed):
    inp = inputs(seed, gap=0.5)
    absent = ~inp.presence
    if not absent.any():
        inp.presence[0, 0] = False
        absent = ~inp.presence
    m = Forecaster(TINY, seed)
    a = m.forecast(inp)
    r = np.random.default_rng(seed)
    x2, app2 = inp.x.copy(), inp.app.copy()
    x2[absent] = r.normal(size=x2[absent].shape) * 10
    app2[absent] = r.normal(size=app2[absent].shape) * 10
    b = m.forecast(replace(inp, x=x2, app=app2))
    assert np.array_equal(a.x_hat.data, b.x_hat.data)
    assert np.array_equal(a.r_hat.data, b.r_hat.data)
    assert np.array_equal(a.p_logit.data, b.p_logit.data)


# -- decoder --------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_decoder_causality(seed):
    inp = inputs(seed)
    m = Forecaster(TINY, seed)
    enc = m.encode(inp)
    agents = np.flatnonzero(inp.presence[:, -1])
    r = np.random.default_rng(seed)
    F = inp.F
    x_prev = r.normal(size=(len(agents), F, 5))
    r_prev = r.normal(size=(len(agents), F, 4, 3, 3))
    h0, a0 = m.decode(inp, enc, agents, x_prev, r_prev, F)
    for t in range(1, F):
        xp, rp = x_prev.copy(), r_prev.copy()
        xp[:, t] += r.normal(size=xp[:, t].shape)
        rp[:, t] += r.normal(size=rp[:, t].shape)
        h1, a1 = m.decode(inp, enc, agents, xp, rp, F)
        before = (np.arange(len(agents))[:, None] * F + np.arange(t)[None]).ravel()
        assert np.array_equal(h0.data[before], h1.data[before])
        assert np.array_equal(a0.data[before], a1.data[before])
        assert not np.array_equal(h0.data, h1.data)


@pytest.mark.parametrize("seed", range(20))
def test_teacher_forced_causality(seed):
    inp = inputs(seed)
    m = Forecaster(TINY, seed)
    base = m.forecast(inp, teacher_forcing=True).x_hat.data
    for t in range(inp.F - 1):
        xf = inp.x_future.copy()
        xf[:, t] += 0.5
        out = m.forecast(replace(inp, x_future=xf), teacher_forcing=True).x_hat.data
        assert np.array_equal(out[:, :t + 1], base[:, :t + 1])


@pytest.mark.parametrize("seed", range(20))
def test_teacher_and_free_agree_on_first_step(seed):
    inp = inputs(seed)
    m = Forecaster(TINY, seed)
    a, b = m.forecast(inp, True), m.forecast(inp, False)
    # same inputs; only the row count seen by the BLAS kernels differs
    np.testing.assert_allclose(a.x_hat.data[:, 0], b.x_hat.data[:, 0], atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.p_logit.data[:, 0], b.p_logit.data[:, 0], atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.r_hat.data[:, 0], b.r_hat.data[:, 0], atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_agent_permutation_equivariance(seed):
    inp = inputs(seed, n=4)
    m = Forecaster(TINY, seed)
    perm = np.random.default_rng(seed).permutation(inp.N)
    a = m.forecast(inp)
    b = m.forecast(inp.subset(perm))
    # rows of b follow the permuted agent order
    pos_a = {int(ag): k for k, ag in enumerate(a.agents)}
    order = [pos_a[int(perm[ag])] for ag in b.agents]
    np.testing.assert_allclose(b.x_hat.data, a.x_hat.data[order], atol=1e-10, rtol=0)
    np.testing.assert_allclose(b.r_hat.data, a.r_hat.data[order], atol=1e-10, rtol=0)


def test_zero_output_head_copies_last_location():
    inp = inputs(3)
    m = Forecaster(TINY, 3)
    for layer in m.f_loc_out.layers:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    out = m.forecast(inp)
    last = inp.x[out.agents, -1]
    for s in range(inp.F):
        np.testing.assert_array_equal(out.x_hat.data[:, s], last)


def test_single_step_horizon():
    inp = inputs(1, F=1)
    out = Forecaster(TINY, 1).forecast(inp)
    assert out.x_hat.shape == (len(out.agents), 1, 5)


def test_agents_absent_at_last_frame_are_skipped():
    inp = inputs(2)
    inp.presence[1, -1] = False
    out = Forecaster(TINY, 2).forecast(inp)
    assert 1 not in out.agents and out.skipped.tolist() == [1]


def test_teacher_forcing_needs_targets():
    inp = replace(inputs(0), x_future=None)
    with pytest.raises(SequenceError):
        Forecaster(TINY, 0).forecast(inp, teacher_forcing=True)


def test_collate_keeps_scenes_apart():
    a, b = inputs(0, n=2), inputs(1, n=3)
    batch = collate([a, b])
    m = Forecaster(TINY, 0)
    joint = m.forecast(batch).x_hat.data
    np.testing.assert_allclose(joint[:2], m.forecast(a).x_hat.data, atol=1e-12)
    np.testing.assert_allclose(joint[2:], m.forecast(b).x_hat.data, atol=1e-12)


# -- velocity head --------------------------------------------------------------


def test_velocity_head_width_and_zero(rng):
    m = Forecaster(TINY, 0)
    h = Tensor(rng.normal(size=(3, TINY.d_e)))
    assert velocity_head(m, h).shape == (3, 4)
    for layer in m.f_vel.layers:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0
    assert np.all(velocity_head(m, h).data == 0.0)


def test_velocity_head_gradient(rng):
    m = Forecaster(TINY, 0)
    w = rng.normal(size=(3, 4))
    err = check_function(lambda h: L.tsum(L.mul(velocity_head(m, h), w)),
                         {"h": rng.normal(size=(3, TINY.d_e))}, m.f_vel.params(), XorShift64(0), per_param=4)
    assert err < 1e-4


# -- end to end -----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient_every_param(seed):
    cfg = RunConfig(d_e=4, d_tau=4, heads=1, ff_hidden=4, layers=1, c_app=2, c_e=2, app_h=2, app_w=2,
                    head_hidden=(4,), T=2, F=2, n_agents=2, seed=seed, iou_sign="one_minus")
    s = generate_scene(seed, 2, 2, 2, c_app=2, app_hw=(2, 2), render=False)
    batch = forecast_inputs(s, Normalizer.fit([s]))
    m = Forecaster(cfg.model_config(), seed)
    err = check_function(lambda: foreground_losses(m, batch, cfg, True)[0], {}, m.params(),
                         XorShift64(seed), per_param=2)
    assert err < 1e-3


def test_full_scale_config_sizes():
    c = ModelConfig.full_scale()
    assert (c.d_e, c.d_tau, c.heads, c.ff_hidden, c.c_app, c.app_hw) == (256, 256, 8, 512, 256, (14, 14))
