import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from notegen.errors import BadTarget, EmptyInput, ShapeMismatch, StaleCache, UnknownVariant
from notegen.model import (VARIANTS, ModelDims, attention_layer, attention_score,
                           attention_weights, bilstm_forward, build_variant, context_vector,
                           loss_and_grads, lstm_cell, model_backward, model_forward, param_count)
from notegen.tensor import grad_check, make_rng, numeric_grad

import oracles

TINY = ModelDims(window=5, hidden=4, attn=3, vocab=7)


def lstm_params(rng, d_in, d, scale=1.0):
    p = {}
    for g in "ifog":
        p[f"W_{g}"] = rng.normal(0, scale, (d_in, d))
        p[f"U_{g}"] = rng.normal(0, scale, (d, d))
        p[f"b_{g}"] = rng.normal(0, scale, d)
    return p


def randomized(variant, dims=TINY, seed=0):
    """Parameters with O(1) entries so no gradient is accidentally tiny."""
    p = build_variant(variant, dims, seed=seed)
    rng = make_rng(seed + 1000)
    for k in p.tensors:
        p.tensors[k] = rng.normal(0, 1.0, p[k].shape)
    return p


# ---------------------------------------------------------------------------
# LSTM


def test_cell_zero():
    p = {f"{m}_{g}": np.zeros(s) for g in "ifog" for m, s in (("W", (2, 3)), ("U", (3, 3)),
                                                                ("b", (3,)))}
    h, c = lstm_cell(np.zeros(2), np.zeros(3), np.zeros(3), p)
    assert h.tolist() == [0.0] * 3 and c.tolist() == [0.0] * 3


def test_cell_saturated_gates_pass_memory_through():
    rng = make_rng(5)
    p = lstm_params(rng, 2, 3, scale=0.1)
    p["b_f"] = np.full(3, 40.0)
    p["b_i"] = np.full(3, -40.0)
    c_prev = np.array([0.3, -1.7, 2.2])
    _, c = lstm_cell(rng.normal(size=2), rng.normal(size=3), c_prev, p)
    np.testing.assert_allclose(c, c_prev, atol=1e-15)


def test_cell_against_scalar_oracle():
    rng = make_rng(6)
    p = lstm_params(rng, 3, 3)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    h, c = lstm_cell(x, h0, c0, p)
    hr, cr = oracles.cell(x.tolist(), h0.tolist(), c0.tolist(), {k: v.tolist() for k, v in p.items()})
    np.testing.assert_allclose(h, hr, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c, cr, rtol=0, atol=1e-12)


def test_cell_shape_mismatch():
    p = lstm_params(make_rng(0), 2, 3)
    with pytest.raises(ShapeMismatch):
        lstm_cell(np.zeros(3), np.zeros(3), np.zeros(3), p)


def test_bilstm_single_step():
    rng = make_rng(7)
    pf, pb = lstm_params(rng, 2, 3), lstm_params(rng, 2, 3)
    x = rng.normal(size=(1, 2))
    H, _ = bilstm_forward(x, pf, pb)
    hf, _ = lstm_cell(x[0], np.zeros(3), np.zeros(3), pf)
    hb, _ = lstm_cell(x[0], np.zeros(3), np.zeros(3), pb)
    np.testing.assert_allclose(H[0], np.concatenate([hf, hb]), atol=1e-15)


def test_bilstm_reversal_symmetry():
    rng = make_rng(8)
    p, q = lstm_params(rng, 2, 3), lstm_params(rng, 2, 3)
    X = rng.normal(size=(6, 2))
    A, _ = bilstm_forward(X[::-1], p, q)
    B, _ = bilstm_forward(X, q, p)
    swapped = np.concatenate([B[:, 3:], B[:, :3]], axis=1)
    np.testing.assert_allclose(A[::-1], swapped, atol=1e-14)


def test_bilstm_against_scalar_oracle():
    rng = make_rng(9)
    pf, pb = lstm_params(rng, 3, 3), lstm_params(rng, 3, 3)
    X = rng.normal(size=(5, 3))
    H, _ = bilstm_forward(X, pf, pb)
    ref = oracles.bilstm(X.tolist(), {k: v.tolist() for k, v in pf.items()},
                         {k: v.tolist() for k, v in pb.items()})
    np.testing.assert_allclose(H, ref, rtol=0, atol=1e-12)


def test_bilstm_empty():
    p = lstm_params(make_rng(0), 1, 2)
    with pytest.raises(EmptyInput):
        bilstm_forward(np.zeros((0, 1)), p, p)


# ---------------------------------------------------------------------------
# attention


def test_score_zero_cases():
    rng = make_rng(1)
    s, h = rng.normal(size=2), rng.normal(size=2)
    assert attention_score(s, h, rng.normal(size=(3, 4)), np.zeros(3)) == 0.0
    assert attention_score(s, h, np.zeros((3, 4)), rng.normal(size=3)) == 0.0


def test_score_against_formula():
    rng = make_rng(2)
    s, h, W, v = rng.normal(size=2), rng.normal(size=2), rng.normal(size=(3, 4)), rng.normal(size=3)
    ref = oracles.score(s.tolist(), h.tolist(), W.tolist(), v.tolist())
    assert abs(attention_score(s, h, W, v) - ref) < 1e-14


def test_score_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        attention_score(np.zeros(2), np.zeros(3), np.zeros((3, 4)), np.zeros(3))


def test_weights_closed_forms():
    assert attention_weights([0.4]).tolist() == [1.0]
    np.testing.assert_allclose(attention_weights([2.0] * 4), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(attention_weights([0.0, math.log(3)]), [0.25, 0.75], atol=1e-15)
    with pytest.raises(EmptyInput):
        attention_weights([])


def test_context_vector():
    rng = make_rng(3)
    H = rng.normal(size=(4, 3))
    assert context_vector(np.eye(4)[2], H).tolist() == H[2].tolist()
    np.testing.assert_allclose(context_vector(np.full(4, 0.25), H), H.mean(axis=0), atol=1e-15)
    alpha = rng.dirichlet(np.ones(4))
    loop = [sum(alpha[j] * H[j, k] for j in range(4)) for k in range(3)]
    np.testing.assert_allclose(context_vector(alpha, H), loop, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        context_vector(np.ones(3) / 3, H)


def test_attention_single_position():
    H = np.array([[0.2, -0.4, 1.1]])
    ctx, cache = attention_layer(H, np.ones((2, 6)), np.ones(2))
    assert cache["A"][0, 0, 0] == 1.0
    assert ctx.tolist() == H.tolist()


def test_attention_zero_v_gives_row_mean():
    rng = make_rng(4)
    H = rng.normal(size=(5, 3))
    ctx, _ = attention_layer(H, rng.normal(size=(2, 6)), np.zeros(2))
    np.testing.assert_allclose(ctx, np.tile(H.mean(axis=0), (5, 1)), atol=1e-15)


def test_attention_matches_composition_of_sub_ops():
    rng = make_rng(5)
    H, W, v = rng.normal(size=(4, 3)), rng.normal(size=(2, 6)), rng.normal(size=2)
    ctx, _ = attention_layer(H, W, v)
    for i in range(4):
        scores = [attention_score(H[i], H[j], W, v) for j in range(4)]
        np.testing.assert_allclose(ctx[i], context_vector(attention_weights(scores), H), atol=1e-14)
    np.testing.assert_allclose(ctx, oracles.attend(H.tolist(), W.tolist(), v.tolist()), atol=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8), st.integers(1, 4))
def test_attention_rows_convex(seed, n, D):
    rng = make_rng(seed)
    H = rng.normal(0, 3, size=(n, D))
    ctx, cache = attention_layer(H, rng.normal(0, 2, size=(3, 2 * D)), rng.normal(0, 2, size=3))
    A = cache["A"][0]
    assert (A >= 0).all()
    assert np.abs(A.sum(axis=1) - 1).max() <= 1e-9
    assert (ctx >= H.min(axis=0) - 1e-12).all() and (ctx <= H.max(axis=0) + 1e-12).all()


# ---------------------------------------------------------------------------
# full model


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_is_distribution(variant):
    p = build_variant(variant, TINY, seed=1)
    probs, _ = model_forward(p, [0, 3, 6, 2, 1])
    assert (probs >= 0).all() and abs(probs.sum() - 1) < 1e-9


@pytest.mark.parametrize("variant", VARIANTS)
def test_zero_params_uniform(variant):
    p = build_variant(variant, TINY, zero=True)
    probs, _ = model_forward(p, [0, 3, 6, 2, 1])
    np.testing.assert_allclose(probs, np.full(7, 1 / 7), atol=1e-15)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_against_scalar_oracle(variant):
    p = randomized(variant, seed=21)
    ids = [4, 0, 6, 6, 2]
    probs, _ = model_forward(p, ids)
    ref = oracles.forward(variant, p.tensors, ids, 7)
    np.testing.assert_allclose(probs, ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("variant", VARIANTS)
def test_batched_forward_matches_single(variant):
    p = build_variant(variant, TINY, seed=2)
    ids = make_rng(0).integers(0, 7, (4, 5))
    batch, _ = model_forward(p, ids)
    for b in range(4):
        single, _ = model_forward(p, ids[b])
        np.testing.assert_allclose(batch[b], single, atol=1e-15)


def test_infer_deterministic():
    p = build_variant("bilstm_attn_lstm", TINY, seed=3)
    a, _ = model_forward(p, [1, 2, 3, 4, 5])
    b, _ = model_forward(p, [1, 2, 3, 4, 5])
    assert a.tobytes() == b.tobytes()


def test_permutation_changes_output():
    p = randomized("bilstm_attn_lstm", seed=4)
    a, _ = model_forward(p, [1, 2, 3, 4, 5])
    b, _ = model_forward(p, [5, 3, 1, 4, 2])
    assert np.abs(a - b).max() > 1e-6


def test_forward_rejects_bad_ids():
    p = build_variant("lstm", TINY)
    with pytest.raises(BadTarget):
        model_forward(p, [0, 7])
    with pytest.raises(ShapeMismatch):
        model_forward(p, [])


def test_train_mode_dropout_changes_output_and_is_seeded():
    p = randomized("bilstm_attn_lstm", seed=5)
    ids = [1, 2, 3, 4, 5]
    a, _ = model_forward(p, ids, "train", rng=make_rng(1), dropout=0.5)
    b, _ = model_forward(p, ids, "train", rng=make_rng(1), dropout=0.5)
    c, _ = model_forward(p, ids)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_unknown_variant():
    with pytest.raises(UnknownVariant):
        build_variant("gru", TINY)


def test_forget_bias_initialised_to_one():
    p = build_variant("bilstm_attn_lstm", TINY, seed=0)
    for prefix in ("fwd", "bwd", "dec"):
        assert (p[f"{prefix}.b_f"] == 1.0).all()
        assert (p[f"{prefix}.b_i"] == 0.0).all()
    k = 1 / math.sqrt(4)
    assert np.abs(p["dec.U_i"]).max() <= k


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("dims", [TINY, ModelDims(100, 512, 128, 3400), ModelDims(9, 6, 2, 11)])
def test_param_count_closed_form(variant, dims):
    p = build_variant(variant, dims, zero=True)
    assert p.count() == param_count(variant, dims)


def test_param_count_full_scale_by_hand():
    # 4*(1*512 + 512^2 + 512) per direction; decoder input 1024
    enc = 4 * (512 + 512 * 512 + 512)
    dec = 4 * (1024 * 512 + 512 * 512 + 512)
    attn = 128 * 2048 + 128
    head = 3400 * 512 + 3400
    assert param_count("bilstm_attn_lstm", ModelDims(100, 512, 128, 3400)) == 2 * enc + attn + dec + head


# ---------------------------------------------------------------------------
# backward


def test_head_bias_grad_closed_form():
    p = randomized("bilstm_attn_lstm", seed=6)
    probs, cache = model_forward(p, [1, 2, 3, 4, 5])
    g = model_backward(cache, 3)
    expected = probs.copy()
    expected[3] -= 1
    np.testing.assert_allclose(g["head.b"], expected, atol=1e-15)


def test_zero_model_head_grad_rows_proportional_to_state():
    p = build_variant("lstm", TINY, zero=True)
    probs, cache = model_forward(p, [1, 2, 3, 4, 5])
    g = model_backward(cache, 2)
    h = cache["h"][0]
    for v in range(7):
        coef = 1 / 7 - (v == 2)
        np.testing.assert_allclose(g["head.W"][v], coef * h, atol=1e-15)


def test_stale_cache():
    p = build_variant("lstm", TINY)
    _, cache = model_forward(p, [1, 2, 3, 4, 5])
    p.bump()
    with pytest.raises(StaleCache):
        model_backward(cache, 0)


def test_backward_bad_target():
    p = build_variant("lstm", TINY)
    _, cache = model_forward(p, [1, 2, 3, 4, 5])
    with pytest.raises(BadTarget):
        model_backward(cache, 7)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences_absolutely(variant, seed):
    p = randomized(variant, seed=seed)
    rng = make_rng(seed)
    ids, tg = rng.integers(0, 7, (3, 5)), rng.integers(0, 7, 3)
    _, g = loss_and_grads(p, ids, tg)
    for name, arr in p.items():
        num = numeric_grad(lambda _: loss_and_grads(p, ids, tg)[0], arr)
        assert np.abs(num - g[name]).max() < 1e-8, name


def test_gradients_with_fixed_dropout_mask():
    p = randomized("bilstm_attn_lstm", seed=7)
    rng = make_rng(7)
    ids, tg = rng.integers(0, 7, (2, 5)), rng.integers(0, 7, 2)
    mask = (rng.random((2, 5, 8)) > 0.3) / 0.7
    kw = dict(mode="train", mask=mask)
    _, g = loss_and_grads(p, ids, tg, **kw)
    for name in ("attn.W_a", "fwd.U_g", "dec.W_i"):
        err = grad_check(lambda _: loss_and_grads(p, ids, tg, **kw)[0], p[name], g[name])
        assert err < 1e-4, name
