import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reordernat import blocks as B
from reordernat import numcore as nc
from reordernat.numcore import ContractError, ParameterError, ShapeError, Tape, Tensor, backward, grad_check

D, H = 8, 2


def attn(seed=0, norm=True):
    return B.init_attention(np.random.default_rng(seed), D, H, D, norm=norm)


def rand(r, *shape):
    return Tensor(r.normal(size=shape))


# --- positions and uniform copy -------------------------------------------


def test_sinusoidal_examples():
    pe = B.sinusoidal_positions(3, 6)
    assert pe[0].tolist() == [0, 1, 0, 1, 0, 1]
    assert B.sinusoidal_positions(1, 2).tolist() == [[0.0, 1.0]]
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-12)
    assert np.abs(B.sinusoidal_positions(50, 16)).max() <= 1.0
    with pytest.raises(ParameterError):
        B.sinusoidal_positions(3, 5)


def test_uniform_copy_examples():
    assert B.uniform_copy_indices(4, 4).tolist() == [0, 1, 2, 3]
    assert B.uniform_copy_indices(4, 8).tolist() == [0, 0, 1, 1, 2, 2, 3, 3]
    assert B.uniform_copy_indices(5, 3).tolist() == [0, 1, 3]
    emb = Tensor(np.arange(10.0).reshape(5, 2))
    np.testing.assert_array_equal(B.uniform_copy(emb, 3).data, emb.data[[0, 1, 3]])


@given(st.integers(1, 40), st.integers(1, 40))
def test_uniform_copy_map_monotone_and_starts_at_zero(n, m):
    idx = B.uniform_copy_indices(n, m)
    assert idx[0] == 0 and (np.diff(idx) >= 0).all() and idx.max() < n
    if m >= n:
        assert set(idx.tolist()) == set(range(n))


# --- attention -------------------------------------------------------------


def test_single_position_attends_to_itself():
    h = rand(np.random.default_rng(1), 1, D)
    _, w = B.multi_head_attention(h, h, attn())
    np.testing.assert_array_equal(w, np.ones((H, 1, 1)))


def test_identical_keys_give_uniform_weights():
    row = np.random.default_rng(2).normal(size=D)
    mem = Tensor(np.tile(row, (5, 1)))
    q = rand(np.random.default_rng(3), 3, D)
    _, w = B.multi_head_attention(q, mem, attn())
    np.testing.assert_allclose(w, 0.2, atol=1e-12)


def test_inter_attention_single_source_and_permutation_invariance():
    r = np.random.default_rng(4)
    p = attn()
    h = rand(r, 2, D)
    _, w = B.inter_attention(h, rand(r, 1, D), p, return_weights=True)
    np.testing.assert_array_equal(w, 1.0)
    same = Tensor(np.tile(r.normal(size=D), (3, 1)))
    a = B.inter_attention(h, same, p).data
    b = B.inter_attention(h, Tensor(same.data[[2, 0, 1]]), p).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ShapeError):
        B.inter_attention(h, rand(r, 3, D + 2), p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_attention_rows_stochastic_under_padding(seed, lq, lk):
    r = np.random.default_rng(seed)
    mask = np.ones((lq, lk), dtype=bool)
    mask[:, r.integers(1, lk + 1):] = False
    _, w = B.multi_head_attention(rand(r, lq, D), rand(r, lk, D), attn(seed), mask)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    assert (w[..., ~mask] == 0).all()


def test_fully_masked_row_is_a_contract_error():
    h = rand(np.random.default_rng(0), 2, D)
    with pytest.raises(ContractError):
        B.self_attention(h, attn(), np.array([[True, False], [False, False]]))


@pytest.mark.parametrize("batch", [False, True])
def test_fused_attention_matches_composed_reference(batch):
    r = np.random.default_rng(5)
    lead = (3,) if batch else ()
    q = Tensor(r.normal(size=lead + (4, D)), requires_grad=True)
    m = Tensor(r.normal(size=lead + (5, D)), requires_grad=True)
    mask = r.random(lead + (4, 5)) < 0.7
    mask[..., 0] = True
    p = attn(7)
    grads = []
    for f in (B.multi_head_attention, B.composed_attention):
        q.grad = m.grad = None
        for _, t in p.named_parameters():
            t.grad = None
        with Tape() as tape:
            out, w = f(q, m, p, mask)
            loss = nc.sum(nc.mul(out, Tensor(np.cos(np.arange(out.size)).reshape(out.shape))))
        backward(loss, tape)
        grads.append((out.data, np.asarray(getattr(w, "data", w)), q.grad.copy(), m.grad.copy(),
                      [t.grad.copy() for _, t in p.named_parameters() if t.grad is not None]))
    (o1, w1, gq1, gm1, gp1), (o2, w2, gq2, gm2, gp2) = grads
    np.testing.assert_allclose(o1, o2, atol=1e-12)
    np.testing.assert_allclose(w1, w2, atol=1e-12)
    np.testing.assert_allclose(gq1, gq2, atol=1e-12)
    np.testing.assert_allclose(gm1, gm2, atol=1e-12)
    for a, b in zip(gp1, gp2):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_self_attention_gradient():
    p = attn(8)
    rep = grad_check(lambda x: nc.sum(nc.tanh(B.self_attention(x, p))), np.random.default_rng(8).normal(size=(3, D)))
    assert rep.max_rel_error < 1e-4


# --- feed-forward and blocks -----------------------------------------------


def test_feed_forward_zero_weights_is_layer_norm_passthrough():
    p = B.init_feed_forward(np.random.default_rng(0), D, H, 16)
    for k in ("w1", "b1", "w2", "b2"):
        p[k].data[...] = 0.0
    h = rand(np.random.default_rng(1), 3, D)
    ref = nc.layer_norm(h, p["ln_g"], p["ln_b"], B.LN_EPS).data
    np.testing.assert_allclose(B.feed_forward(h, p).data, ref, atol=1e-15)


def test_feed_forward_hand_computed_d2():
    p = B.init_feed_forward(np.random.default_rng(0), 2, 1, 2)
    p["w1"].data[...] = [[1.0, -1.0], [2.0, 0.5]]
    p["b1"].data[...] = [0.0, 1.0]
    p["w2"].data[...] = [[1.0, 0.0], [0.0, 2.0]]
    p["b2"].data[...] = [0.5, -0.5]
    # h = [1, 1]: inner = relu([3, 0.5]) = [3, 0.5]; out = [3.5, 0.5]; residual [4.5, 1.5]
    # layer norm of [4.5, 1.5]: mean 3, std 1.5 -> [1, -1] (eps shrinks it by ~1e-7)
    out = B.feed_forward(Tensor([[1.0, 1.0]]), p).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-6)


def test_feed_forward_gradient():
    p = B.init_feed_forward(np.random.default_rng(3), D, H, 12)
    rep = grad_check(lambda x: nc.sum(nc.sigmoid(B.feed_forward(x, p))), np.random.default_rng(9).normal(size=(2, D)))
    assert rep.max_rel_error < 1e-4


@pytest.mark.parametrize("n", [1, 5, 17])
def test_encoder_block_preserves_shape(n):
    p = B.init_encoder_block(np.random.default_rng(0), D, H, 16)
    assert B.encoder_block(rand(np.random.default_rng(n), n, D), p).shape == (n, D)


def test_stacked_encoder_blocks_equal_repeated_application():
    r = np.random.default_rng(1)
    p = B.init_encoder_block(r, D, H, 16)
    h = rand(r, 4, D)
    twice = B.encoder_block(B.encoder_block(h, p), p)
    x = h
    for _ in range(2):
        x = B.feed_forward(B.self_attention(x, p.children["self"]), p.children["ffn"])
    np.testing.assert_array_equal(twice.data, x.data)


def test_encoder_block_gradient():
    p = B.init_encoder_block(np.random.default_rng(2), D, H, 16)
    rep = grad_check(lambda x: nc.sum(nc.tanh(B.encoder_block(x, p))), np.random.default_rng(2).normal(size=(3, D)))
    assert rep.max_rel_error < 1e-4


def test_decoder_block_nat_mask_sees_every_position():
    r = np.random.default_rng(3)
    p = B.init_decoder_block(r, D, H, 16)
    h, s = r.normal(size=(4, D)), rand(r, 3, D)
    base = B.transformer_decoder_block(Tensor(h), s, p, B.full_mask(4)).data
    h2 = h.copy()
    h2[3] += 1.0
    out = B.transformer_decoder_block(Tensor(h2), s, p, B.full_mask(4)).data
    assert np.abs(out[0] - base[0]).max() > 1e-6


def test_decoder_block_causal_mask_is_exact():
    r = np.random.default_rng(4)
    p = B.init_decoder_block(r, D, H, 16)
    h, s = r.normal(size=(5, D)), rand(r, 3, D)
    base = B.transformer_decoder_block(Tensor(h), s, p, B.causal_mask(5)).data
    for j in range(1, 5):
        h2 = h.copy()
        h2[j] += r.normal(size=D)
        out = B.transformer_decoder_block(Tensor(h2), s, p, B.causal_mask(5)).data
        assert out[:j].tobytes() == base[:j].tobytes()


def test_decoder_block_smoke_shape():
    p = B.init_decoder_block(np.random.default_rng(0), D, H, 16)
    r = np.random.default_rng(0)
    assert B.transformer_decoder_block(rand(r, 1, D), rand(r, 1, D), p, B.full_mask(1)).shape == (1, D)


# --- GRU --------------------------------------------------------------------


def gru():
    return B.init_gru_block(np.random.default_rng(0), D, H, 16)


def test_gru_zero_weights():
    p = gru()
    for k in ("wr", "br", "wz", "bz", "wh", "bh"):
        p[k].data[...] = 0.0
    h = np.random.default_rng(1).normal(size=D)
    x = Tensor(np.random.default_rng(2).normal(size=2 * D))
    np.testing.assert_allclose(B.gru_step(Tensor(h), x, p).data, 0.5 * h, atol=1e-15)
    np.testing.assert_array_equal(B.gru_step(Tensor(np.zeros(D)), x, p).data, 0.0)


def test_gru_shape_errors():
    p = gru()
    with pytest.raises(ShapeError):
        B.gru_step(Tensor(np.zeros(D + 1)), Tensor(np.zeros(2 * D)), p)
    with pytest.raises(ShapeError):
        B.gru_step(Tensor(np.zeros(D)), Tensor(np.zeros(D)), p)


def test_fused_gru_matches_composed_reference():
    p = gru()
    r = np.random.default_rng(3)
    h = Tensor(r.normal(size=(2, D)), requires_grad=True)
    x = Tensor(r.normal(size=(2, 2 * D)), requires_grad=True)
    res = []
    for f in (B.gru_step, B.composed_gru_step):
        h.grad = x.grad = None
        for _, t in p.named_parameters():
            t.grad = None
        with Tape() as tape:
            y = f(h, x, p)
            loss = nc.sum(nc.mul(y, Tensor(np.sin(np.arange(y.size)).reshape(y.shape))))
        backward(loss, tape)
        res.append([y.data, h.grad, x.grad] + [p[k].grad for k in ("wr", "br", "wz", "bz", "wh", "bh")])
    for a, b in zip(*res):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_gru_three_chained_steps_gradient():
    p = gru()
    xs = [Tensor(v) for v in np.random.default_rng(4).normal(size=(3, 2 * D))]

    def f(h):
        for x in xs:
            h = B.gru_step(h, x, p)
        return nc.sum(nc.mul(h, h))

    rep = grad_check(f, np.random.default_rng(5).normal(size=D), h=1e-5, tol=1e-4)
    assert rep.passed, rep
