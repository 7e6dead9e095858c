import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causaltraffic import numerics as nx
from causaltraffic.cpn import (
    Batch,
    CheckpointError,
    ModelConfig,
    ModelState,
    attention_block,
    base_counterfactual,
    encode_neighbors,
    forward,
    graph_prior_attention,
    gru_encode,
    init_params,
    load_checkpoint,
    positional_encoding,
    save_checkpoint,
    spatiotemporal_fuse,
)
from causaltraffic.cpn.checkpoint import from_bytes, to_bytes
from causaltraffic.data import Normalizer
from causaltraffic.features import NEUTRAL
from causaltraffic.numerics import Tensor


def toy_config(**kw):
    base = dict(lookback=6, horizon=2, hidden=8, layers=2, heads=2, neighbors=3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg, B, rng, events=True):
    T, K = cfg.lookback, cfg.neighbors
    x = rng.normal(size=(B, T, cfg.input_dim))
    xn = rng.normal(size=(B, K, T, cfg.input_dim))
    valid = rng.random((B, K)) < 0.7
    w = rng.uniform(0.1, 1.0, (B, K)) * valid
    s = w.sum(axis=1, keepdims=True)
    w = np.divide(w, s, out=np.zeros_like(w), where=s > 0)
    E = np.broadcast_to(NEUTRAL, (B, T, cfg.causal_dim)).copy()
    m = np.zeros((B, T))
    if events:
        m = (rng.random((B, T)) < 0.3).astype(float)
        on = m > 0
        E[on] = np.column_stack([rng.normal(-8, 4, on.sum()), rng.integers(1, 3, on.sum()),
                                 rng.uniform(0, 60, on.sum()), rng.uniform(0.3, 0.9, on.sum()),
                                 rng.uniform(0, 4, on.sum()), rng.uniform(0, 1, on.sum())])
    y = rng.normal(size=(B, cfg.horizon))
    return Batch(x, xn, w, valid, E, m, y, m.any(axis=1))


def zero_params(p):
    for t in p.values():
        t.value = np.zeros(t.shape)


# -- GRU ---------------------------------------------------------------------

def test_gru_zero_weights_give_zero_states():
    cfg = toy_config()
    p = init_params(cfg, np.random.default_rng(0))
    zero_params(p)
    h = gru_encode(np.zeros((2, 6, 3)), p)
    np.testing.assert_array_equal(h.value, 0.0)


def test_gru_single_step_matches_hand_arithmetic():
    d, D = 2, 1
    p = {"gru_w": Tensor(np.array([[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]])),
         "gru_u": Tensor(np.arange(12).reshape(2, 6) * 0.05),
         "gru_b": Tensor(np.array([0.01, 0.02, 0.03, 0.04, 0.05, 0.06]))}
    x = 0.7
    sig = lambda v: 1 / (1 + math.exp(-v))
    w, b = p["gru_w"].value[0], p["gru_b"].value
    # zero initial state: recurrent terms vanish
    want = []
    for j in range(d):
        z = sig(x * w[j] + b[j])
        n = math.tanh(x * w[2 * d + j] + b[2 * d + j])
        want.append((1 - z) * n)
    h = gru_encode(np.full((1, 1, D), x), p)
    np.testing.assert_allclose(h.value[0, 0], want, rtol=0, atol=1e-12)

    # second step exercises the recurrent weights and the reset gate
    h0 = np.array(want)
    u = p["gru_u"].value
    x2 = -0.3
    hu = h0 @ u
    want2 = []
    for j in range(d):
        z = sig(x2 * w[j] + hu[j] + b[j])
        r = sig(x2 * w[d + j] + hu[d + j] + b[d + j])
        n = math.tanh(x2 * w[2 * d + j] + b[2 * d + j] + r * hu[2 * d + j])
        want2.append((1 - z) * n + z * h0[j])
    h = gru_encode(np.array([[[x], [x2]]]), p)
    np.testing.assert_allclose(h.value[0, 1], want2, rtol=0, atol=1e-12)


def test_gru_states_bounded():
    cfg = toy_config()
    p = init_params(cfg, np.random.default_rng(1))
    h = gru_encode(np.random.default_rng(2).normal(0, 10, (4, 6, 3)), p)
    assert np.all(np.abs(h.value) < 1)


def test_gru_gradient_three_step_toy():
    rng = np.random.default_rng(3)
    p = {"gru_w": Tensor(rng.normal(0, 0.5, (2, 9)), requires_grad=True),
         "gru_u": Tensor(rng.normal(0, 0.5, (3, 9)), requires_grad=True),
         "gru_b": Tensor(rng.normal(0, 0.1, 9), requires_grad=True)}
    x = rng.normal(size=(2, 3, 2))
    err, name, idx = nx.check_parameters(lambda: (gru_encode(x, p) ** 2).sum(), p, step=1e-5)
    assert err <= 1e-4, (name, idx)


# -- positional encoding -----------------------------------------------------

def test_positional_encoding_at_zero():
    pe = positional_encoding(15, 64)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert np.all(np.abs(pe) <= 1)


def test_positional_encoding_recomputed():
    pe = positional_encoding(16, 64)
    for t in range(1, 16):
        for i in range(64):
            k = i // 2
            ang = t / 10000 ** (2 * k / 64)
            want = math.sin(ang) if i % 2 == 0 else math.cos(ang)
            assert pe[t, i] == pytest.approx(want, abs=1e-12)


# -- neighbors and graph attention --------------------------------------------

def test_neighbor_encoding_equals_target_encoding():
    cfg = toy_config()
    rng = np.random.default_rng(4)
    p = init_params(cfg, rng)
    xn = rng.normal(size=(2, 3, 6, 3))
    hn = encode_neighbors(xn, p)
    for b in range(2):
        for k in range(3):
            np.testing.assert_allclose(hn.value[b, k], gru_encode(xn[b, k][None], p).value[0],
                                       rtol=0, atol=1e-14)


def test_neighbor_path_carries_no_gradient_to_gru():
    cfg = toy_config()
    rng = np.random.default_rng(5)
    p = init_params(cfg, rng)
    b = random_batch(cfg, 3, rng)
    hn = encode_neighbors(b.xn, p)
    z = Tensor(rng.normal(size=(3, 6, 8)))          # target path frozen
    g = graph_prior_attention(z, hn, b.nw, b.nvalid, p)
    (g ** 2).sum().backward()
    for name in ("gru_w", "gru_u", "gru_b"):
        grad = p[name].grad
        assert grad is None or np.all(grad == 0)
    assert p["graph_v"].grad is not None and np.any(p["graph_v"].grad != 0)


def test_zero_neighbors_give_zero_context():
    cfg = toy_config(neighbors=0)
    p = init_params(cfg, np.random.default_rng(6))
    hn = encode_neighbors(np.zeros((2, 0, 6, 3)), p)
    assert hn.shape == (2, 0, 6, 8)
    g = graph_prior_attention(Tensor(np.ones((2, 6, 8))), hn, np.zeros((2, 0)), np.zeros((2, 0), bool), p)
    np.testing.assert_array_equal(g.value, 0.0)


def test_single_neighbor_context_is_its_value():
    cfg = toy_config()
    rng = np.random.default_rng(7)
    p = init_params(cfg, rng)
    hn = Tensor(rng.normal(size=(1, 1, 6, 8)))
    g = graph_prior_attention(Tensor(rng.normal(size=(1, 6, 8))), hn, np.array([[1.0]]),
                              np.array([[True]]), p)
    np.testing.assert_allclose(g.value[0], hn.value[0, 0] @ p["graph_v"].value, atol=1e-14)


def test_bias_only_attention_reduces_to_prior():
    cfg = toy_config()
    rng = np.random.default_rng(8)
    p = init_params(cfg, rng)
    p["graph_k"].value = np.zeros((8, 8))           # equal scores: only log w remains
    hn = Tensor(rng.normal(size=(1, 2, 6, 8)))
    g = graph_prior_attention(Tensor(rng.normal(size=(1, 6, 8))), hn, np.array([[0.8, 0.2]]),
                              np.array([[True, True]]), p)
    v = hn.value[0] @ p["graph_v"].value
    np.testing.assert_allclose(g.value[0], 0.8 * v[0] + 0.2 * v[1], atol=1e-14)


def test_five_neighbor_attention_brute_force():
    cfg = toy_config()
    rng = np.random.default_rng(9)
    p = init_params(cfg, rng)
    z = rng.normal(size=(2, 6, 8))
    hn = rng.normal(size=(2, 5, 6, 8))
    w = rng.dirichlet(np.ones(5), size=2)
    valid = np.array([[True] * 5, [True, True, False, True, False]])
    g = graph_prior_attention(Tensor(z), Tensor(hn), w, valid, p)
    Q, Kp, V = (p[k].value for k in ("graph_q", "graph_k", "graph_v"))
    for b in range(2):
        for t in range(6):
            q = z[b, t] @ Q
            scores = []
            for j in range(5):
                s = float(np.dot(hn[b, j, t] @ Kp, q)) / math.sqrt(8) + math.log(max(w[b, j], 1e-6))
                scores.append(s if valid[b, j] else -math.inf)
            top = max(scores)
            ex = [math.exp(s - top) for s in scores]
            att = [e / sum(ex) for e in ex]
            want = sum(a * (hn[b, j, t] @ V) for j, a in enumerate(att))
            np.testing.assert_allclose(g.value[b, t], want, atol=1e-12)


# -- fusion -------------------------------------------------------------------

def test_fusion_without_neighbors_is_target_only():
    cfg = toy_config()
    rng = np.random.default_rng(10)
    p = init_params(cfg, rng)
    z = rng.normal(size=(2, 6, 8))
    out = spatiotemporal_fuse(Tensor(z), Tensor(rng.normal(size=(2, 6, 8))), np.array([False, False]), p)
    ctx = z @ p["fuse_v"].value @ p["fuse_o"].value
    want = nx.layer_norm(Tensor(z + ctx), p["fuse_ln_g"], p["fuse_ln_b"]).value
    np.testing.assert_allclose(out.value, want, atol=1e-12)


@pytest.mark.parametrize("K", range(6))
def test_forward_shapes_for_any_neighbor_count(K):
    cfg = toy_config(neighbors=K)
    rng = np.random.default_rng(K)
    p = init_params(cfg, rng)
    out = forward(p, cfg, random_batch(cfg, 3, rng))
    assert out.y_hat.shape == (3, 2)
    assert out.alpha.shape == (3, 2, 6, 6)
    assert out.attention_map.shape == (3, 6, 6)


def test_fusion_gradient_check():
    cfg = toy_config()
    rng = np.random.default_rng(11)
    p = init_params(cfg, rng)
    z = rng.normal(size=(2, 6, 8))
    g = rng.normal(size=(2, 6, 8))
    names = ("fuse_q", "fuse_k", "fuse_v", "fuse_o", "fuse_ln_g", "fuse_ln_b")
    sub = {k: p[k] for k in names}
    target = rng.normal(size=(2, 6, 8))
    err, name, idx = nx.check_parameters(
        lambda: ((spatiotemporal_fuse(Tensor(z), Tensor(g), np.array([True, False]), p) - target) ** 2).sum(),
        sub, step=1e-5)
    assert err <= 1e-4, (name, idx)


# -- causal attention ----------------------------------------------------------

def plain_attention(z, p, layer, heads):
    B, T, d = z.shape
    dk = d // heads
    pre = f"attn{layer}_"
    q, k, v = (z @ p[pre + s].value for s in ("q", "k", "v"))
    ctx = np.zeros_like(z)
    for b in range(B):
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            s = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(dk)
            s[np.triu_indices(T, 1)] = -np.inf
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            ctx[b, :, sl] = a @ v[b, :, sl]
    return nx.layer_norm(Tensor(z + ctx @ p[pre + "o"].value), p[pre + "ln_g"], p[pre + "ln_b"]).value


def test_zero_event_bias_is_plain_attention():
    cfg = toy_config()
    rng = np.random.default_rng(12)
    p = init_params(cfg, rng)
    z = rng.normal(size=(3, 6, 8))
    out, _ = attention_block(Tensor(z), np.zeros((3, 6)), 0, 2, p)
    np.testing.assert_allclose(out.value, plain_attention(z, p, 0, 2), atol=1e-12)
    # with beta = 0 the flags themselves are irrelevant
    out2, _ = attention_block(Tensor(z), np.ones((3, 6)), 0, 2, p)
    np.testing.assert_allclose(out2.value, out.value, atol=1e-14)


def test_attention_mask_and_row_sums():
    cfg = toy_config()
    rng = np.random.default_rng(13)
    p = init_params(cfg, rng)
    p["beta_attn"].value = np.array(1.5)
    out = forward(p, cfg, random_batch(cfg, 5, rng))
    for a in out.alphas:
        upper = a.value[..., np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]]
        assert np.all(upper == 0.0)
        np.testing.assert_allclose(a.value.sum(axis=-1), 1.0, atol=1e-6)


def test_one_hot_event_with_beta_five_matches_hand_softmax():
    cfg = toy_config(heads=1)
    rng = np.random.default_rng(14)
    p = init_params(cfg, rng)
    p["attn0_q"].value = np.zeros((8, 8))           # uniform q.k
    p["beta_attn"].value = np.array(5.0)
    s_star = 2
    m = np.zeros((1, 6))
    m[0, s_star] = 1
    _, alpha = attention_block(Tensor(rng.normal(size=(1, 6, 8))), m, 0, 1, p)
    a = alpha.value[0, 0]
    for t in range(6):
        if t < s_star:
            np.testing.assert_allclose(a[t, :t + 1], 1 / (t + 1), atol=1e-15)
            continue
        denom = math.exp(5) + t
        assert a[t, s_star] == pytest.approx(math.exp(5) / denom, abs=1e-12)
        others = [s for s in range(t + 1) if s != s_star]
        np.testing.assert_allclose(a[t, others], 1 / denom, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3), st.integers(0, 5))
def test_event_bias_monotone(beta, step, s_star):
    cfg = toy_config()
    rng = np.random.default_rng(15)
    p = init_params(cfg, rng)
    z = Tensor(rng.normal(size=(1, 6, 8)))
    m = np.zeros((1, 6))
    m[0, s_star] = 1
    mass = []
    for b in (beta, beta + step):
        p["beta_attn"].value = np.array(b)
        _, a = attention_block(z, m, 0, 2, p)
        mass.append(a.value[0, :, :, s_star].sum())
    assert mass[1] >= mass[0] - 1e-12


def test_future_perturbation_leaves_earlier_rows_unchanged():
    cfg = toy_config()
    rng = np.random.default_rng(16)
    p = init_params(cfg, rng)
    p["beta_attn"].value = np.array(0.7)
    b = random_batch(cfg, 4, rng)
    s = 3
    b2 = Batch(b.x.copy(), b.xn.copy(), b.nw, b.nvalid, b.E.copy(), b.m.copy(), b.y, b.event)
    b2.x[:, s:, 0] += 5.0
    b2.xn[:, :, s:, 0] -= 2.0
    b2.E[:, s, 0] -= 10
    b2.m[:, s] = 1 - b2.m[:, s]
    a1, a2 = forward(p, cfg, b), forward(p, cfg, b2)
    for l1, l2 in zip(a1.alphas, a2.alphas):
        np.testing.assert_allclose(l1.value[:, :, :s, :], l2.value[:, :, :s, :], atol=1e-13)
        assert not np.allclose(l1.value[:, :, s:, :], l2.value[:, :, s:, :])


# -- heads and counterfactual --------------------------------------------------

def test_zeroed_causal_head_gives_base():
    cfg = toy_config()
    rng = np.random.default_rng(17)
    p = init_params(cfg, rng)
    p["acausal_w2"].value = np.zeros((8, 2))
    out = forward(p, cfg, random_batch(cfg, 4, rng))
    np.testing.assert_array_equal(out.y_hat.value, out.y_base.value)


def test_closed_gate_gives_base():
    cfg = toy_config()
    rng = np.random.default_rng(18)
    p = init_params(cfg, rng)
    p["g_raw"].value = np.array(-1000.0)
    out = forward(p, cfg, random_batch(cfg, 4, rng))
    assert out.gate.item() == 0.0
    np.testing.assert_array_equal(out.y_hat.value, out.y_base.value)


def test_decomposition_identity_over_many_passes():
    rng = np.random.default_rng(19)
    cfg = toy_config()
    worst = 0.0
    for trial in range(20):
        p = init_params(cfg, rng)
        p["g_raw"].value = np.array(rng.normal(0, 3))
        p["beta_attn"].value = np.array(rng.normal(0, 2))
        out = forward(p, cfg, random_batch(cfg, 500, rng))
        resid = out.y_hat.value - out.y_base.value - out.gate.value * out.a_causal.value
        worst = max(worst, float(np.abs(resid).max()))
    assert worst <= 1e-12


def test_counterfactual_equals_base_without_events():
    cfg = toy_config()
    rng = np.random.default_rng(20)
    p = init_params(cfg, rng)
    b = random_batch(cfg, 6, rng, events=False)
    np.testing.assert_array_equal(base_counterfactual(p, cfg, b).value, forward(p, cfg, b).y_base.value)
    np.testing.assert_array_equal(base_counterfactual(p, cfg, b).value, base_counterfactual(p, cfg, b).value)


def test_counterfactual_differs_only_through_causal_path():
    cfg = toy_config()
    rng = np.random.default_rng(21)
    p = init_params(cfg, rng)
    p["beta_attn"].value = np.array(1.0)
    b = random_batch(cfg, 6, rng)
    assert b.m.any()
    assert not np.allclose(base_counterfactual(p, cfg, b).value, forward(p, cfg, b).y_base.value)
    # silence the causal embedding and the event bias: toggling E has no effect
    p["causal_w2"].value = np.zeros((8, 8))
    p["causal_b2"].value = np.zeros(8)
    p["beta_attn"].value = np.array(0.0)
    np.testing.assert_allclose(base_counterfactual(p, cfg, b).value, forward(p, cfg, b).y_base.value,
                               atol=1e-14)


def test_full_model_gradient_check():
    cfg = ModelConfig(lookback=6, horizon=2, hidden=8, layers=2, heads=1, neighbors=2)
    rng = np.random.default_rng(22)
    p = init_params(cfg, rng)
    p["beta_attn"].value = np.array(0.5)
    b = random_batch(cfg, 2, rng)
    hn = encode_neighbors(b.xn, p)                  # detached: held fixed

    def loss():
        out = forward(p, cfg, b, neighbor_states=hn)
        mse = ((out.y_hat - b.y) ** 2).mean()
        return mse + 0.01 * nx.xlogx(out.alpha).sum() / 2
    err, name, idx = nx.check_parameters(loss, p, step=1e-4)
    assert err <= 1e-4, (err, name, idx)


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = toy_config()
    p = init_params(cfg, np.random.default_rng(23))
    state = ModelState(cfg, p, Normalizer(52.25, 9.125), phase=3, extra={"epoch": 7})
    save_checkpoint(tmp_path / "model.ckpt", state)
    back = load_checkpoint(tmp_path)
    assert back.config == cfg and back.normalizer == state.normalizer and back.phase == 3
    assert list(back.params) == list(p)
    for k in p:
        assert back.params[k].value.tobytes() == p[k].value.tobytes()
        assert back.params[k].shape == p[k].shape
    assert to_bytes(back) == to_bytes(state)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "missing")
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTACKPT" + b"\0" * 8)
