import numpy as np
import pytest

from headlab.attention import (
    AttentionKind,
    HeadId,
    HeadMask,
    HeadParams,
    HeadTaps,
    MhaLayer,
    attend,
    causal_additive_mask,
    head_output,
    key_mask_to_additive,
    mha_sum,
    multi_head_attention,
    single_head_attention,
)
from headlab.tensor import ComputationRecord, ShapeError, Tensor, backward, mul, sum_all
from oracles import assert_close_rel, fd_grad, single_head_mp


def random_head(rng, d, d_h, scale=0.8) -> HeadParams:
    return HeadParams(
        w_q=Tensor(rng.normal(size=(d_h, d)) * scale),
        w_k=Tensor(rng.normal(size=(d_h, d)) * scale),
        w_v=Tensor(rng.normal(size=(d_h, d)) * scale),
        w_o=Tensor(rng.normal(size=(d, d_h)) * scale),
    )


def random_layer(rng, kind, layer_index, n_heads, d) -> MhaLayer:
    d_h = d // n_heads
    heads = [random_head(rng, d, d_h) for _ in range(n_heads)]
    return MhaLayer(kind=kind, layer_index=layer_index, d_model=d, heads=heads)


# ---------------------------------------------------------------------------
# identifiers and masks
# ---------------------------------------------------------------------------


def test_head_id_roundtrip_and_ordering():
    hid = HeadId(AttentionKind.ENC_DEC, 2, 5)
    assert HeadId.parse(str(hid)) == hid
    a = HeadId(AttentionKind.ENC_ENC, 3, 7)
    b = HeadId(AttentionKind.ENC_DEC, 0, 0)
    assert a.sort_key() < b.sort_key()


def test_head_mask_defaults_and_validation():
    m = HeadMask()
    hid = HeadId(AttentionKind.SELF_ONLY, 0, 1)
    assert m[hid] == 1.0
    m[hid] = 0.0
    assert m[hid] == 0.0
    assert m.masked_ids() == {hid}
    m[hid] = 1.0
    assert m.masked_ids() == frozenset()
    with pytest.raises(ValueError, match="0.0 or 1.0"):
        m[hid] = 0.5


def test_head_params_shape_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        HeadParams(
            w_q=Tensor(rng.normal(size=(2, 4))),
            w_k=Tensor(rng.normal(size=(2, 4))),
            w_v=Tensor(rng.normal(size=(3, 4))),
            w_o=Tensor(rng.normal(size=(4, 2))),
        )


def test_layer_param_count_matches_full_rank_attention():
    rng = np.random.default_rng(1)
    d, n_heads = 16, 4
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, n_heads, d)
    assert layer.param_count() == 4 * d * d


# ---------------------------------------------------------------------------
# single head
# ---------------------------------------------------------------------------


def test_single_key_means_weight_one():
    rng = np.random.default_rng(2)
    d, d_h = 4, 2
    p = random_head(rng, d, d_h)
    x = rng.normal(size=(1, d))
    q = rng.normal(size=d)
    out = single_head_attention(p, x, q).data
    want = p.w_o.data @ (p.w_v.data @ x[0])
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_identical_positions_give_uniform_weights():
    rng = np.random.default_rng(3)
    d, d_h, n = 6, 3, 5
    p = random_head(rng, d, d_h)
    row = rng.normal(size=d)
    x = np.tile(row, (n, 1))
    q = rng.normal(size=d)
    out = single_head_attention(p, x, q).data
    want = p.w_o.data @ (p.w_v.data @ row)
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_single_head_matches_extended_precision_formula():
    rng = np.random.default_rng(4)
    d, d_h, n = 2, 2, 2
    p = random_head(rng, d, d_h, scale=1.0)
    x = rng.normal(size=(n, d))
    q = rng.normal(size=d)
    got = single_head_attention(p, x, q).data
    want = single_head_mp(p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, x, q, scale_dim=d)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_scale_mode_model_dim_vs_head_dim():
    rng = np.random.default_rng(5)
    d, d_h, n = 8, 2, 4
    p = random_head(rng, d, d_h)
    x = rng.normal(size=(n, d))
    q = rng.normal(size=d)
    by_model = single_head_attention(p, x, q, scale_mode="model_dim").data
    by_head = single_head_attention(p, x, q, scale_mode="head_dim").data
    want = single_head_mp(p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data, x, q, scale_dim=d_h)
    np.testing.assert_allclose(by_head, want, atol=1e-12)
    assert not np.allclose(by_model, by_head)


def test_key_mask_restricts_attention_and_errors_when_empty():
    rng = np.random.default_rng(6)
    d, d_h = 4, 2
    p = random_head(rng, d, d_h)
    x = rng.normal(size=(3, d))
    q = rng.normal(size=d)
    only_first = single_head_attention(p, x, q, key_mask=[True, False, False]).data
    want = p.w_o.data @ (p.w_v.data @ x[0])
    np.testing.assert_allclose(only_first, want, atol=1e-12)
    with pytest.raises(ValueError, match="masked"):
        single_head_attention(p, x, q, key_mask=[False, False, False])


# ---------------------------------------------------------------------------
# multi-head sum, gates, head outputs
# ---------------------------------------------------------------------------


def test_mha_equals_sum_of_heads():
    rng = np.random.default_rng(7)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 4, 8)
    x = rng.normal(size=(5, 8))
    q = rng.normal(size=8)
    full = multi_head_attention(layer, x, q).data
    parts = sum(head_output(layer, h, x, q).data for h in range(4))
    np.testing.assert_allclose(full, parts, atol=1e-12)


def test_all_gates_zero_gives_zero_vector():
    rng = np.random.default_rng(8)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 2, 6)
    mask = HeadMask()
    for hid in layer.head_ids():
        mask[hid] = 0.0
    out = multi_head_attention(layer, rng.normal(size=(3, 6)), rng.normal(size=6), mask=mask)
    np.testing.assert_array_equal(out.data, np.zeros(6))


def test_masking_one_head_equals_subtracting_it():
    rng = np.random.default_rng(9)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 4, 8)
    x = rng.normal(size=(4, 8))
    q = rng.normal(size=8)
    mask = HeadMask({HeadId(AttentionKind.SELF_ONLY, 0, 2): 0.0})
    masked = multi_head_attention(layer, x, q, mask=mask).data
    full = multi_head_attention(layer, x, q).data
    h2 = head_output(layer, 2, x, q).data
    np.testing.assert_allclose(masked, full - h2, atol=1e-12)


def test_masking_identity_over_random_masks():
    rng = np.random.default_rng(10)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 6, 12)
    x = rng.normal(size=(5, 12))
    q = rng.normal(size=12)
    full = multi_head_attention(layer, x, q).data
    for _ in range(20):
        masked_set = [h for h in range(6) if rng.random() < 0.5]
        mask = HeadMask({HeadId(AttentionKind.SELF_ONLY, 0, h): 0.0 for h in masked_set})
        partial = multi_head_attention(layer, x, q, mask=mask).data
        restored = partial + sum(
            (head_output(layer, h, x, q).data for h in masked_set), np.zeros(12)
        )
        np.testing.assert_allclose(restored, full, atol=1e-12)


def test_head_output_zero_projection_and_range_error():
    rng = np.random.default_rng(11)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 2, 4)
    layer.heads[1] = HeadParams(
        w_q=layer.heads[1].w_q,
        w_k=layer.heads[1].w_k,
        w_v=layer.heads[1].w_v,
        w_o=Tensor(np.zeros((4, 2))),
    )
    x = rng.normal(size=(3, 4))
    q = rng.normal(size=4)
    np.testing.assert_array_equal(head_output(layer, 1, x, q).data, np.zeros(4))
    with pytest.raises(IndexError):
        head_output(layer, 5, x, q)


def test_attention_weights_form_distribution_over_unmasked():
    rng = np.random.default_rng(12)
    d, d_h, n = 6, 3, 5
    p = random_head(rng, d, d_h)
    from headlab.tensor import linear, matmul, softmax, transpose_last2, scale as t_scale
    import math

    x = Tensor(rng.normal(size=(1, n, d)))
    q = Tensor(rng.normal(size=(1, 1, d)))
    keep = np.array([True, True, False, True, False])
    mask_t = Tensor(key_mask_to_additive(keep))
    scores = t_scale(
        matmul(linear(q, p.w_q), transpose_last2(linear(x, p.w_k))), 1.0 / math.sqrt(d)
    )
    alpha = softmax(Tensor(scores.data + mask_t.data), axis=-1).data[0, 0]
    assert alpha[~keep].max() == 0.0
    np.testing.assert_allclose(alpha.sum(), 1.0, atol=1e-12)
    assert (alpha >= 0).all()


def test_causal_mask_blocks_future():
    m = causal_additive_mask(3)
    assert m[0, 1] == -np.inf and m[0, 2] == -np.inf and m[1, 2] == -np.inf
    assert m[1, 0] == 0.0 and m[2, 2] == 0.0


# ---------------------------------------------------------------------------
# gate gradients through the tape
# ---------------------------------------------------------------------------


def test_gate_gradient_equals_inner_product_identity():
    rng = np.random.default_rng(13)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 4, 8)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    with ComputationRecord() as rec:
        taps = HeadTaps(rec)
        out = mha_sum(layer, x, x, None, lambda hid: 1.0, taps=taps)
        loss = sum_all(mul(out, out))
    grads = backward(rec, loss)
    for hid in layer.head_ids():
        att = taps.outputs[hid]
        gate_grad = grads.grad(taps.gates[hid]).item()
        inner = float((att.data * grads.grad(att).data).sum())
        assert_close_rel(gate_grad, inner, 1e-10)


def test_gate_gradient_matches_finite_differences():
    rng = np.random.default_rng(14)
    layer = random_layer(rng, AttentionKind.SELF_ONLY, 0, 2, 6)
    x = Tensor(rng.normal(size=(1, 4, 6)))
    target = HeadId(AttentionKind.SELF_ONLY, 0, 1)

    def loss_at(gate_value: float) -> float:
        out = mha_sum(
            layer, x, x, None, lambda hid: gate_value if hid == target else 1.0
        )
        return sum_all(mul(out, out)).item()

    with ComputationRecord() as rec:
        taps = HeadTaps(rec)
        out = mha_sum(layer, x, x, None, lambda hid: 1.0, taps=taps)
        loss = sum_all(mul(out, out))
    grads = backward(rec, loss)
    analytic = grads.grad(taps.gates[target]).item()
    eps = 1e-3
    numeric = (loss_at(1.0 + eps) - loss_at(1.0 - eps)) / (2 * eps)
    assert_close_rel(analytic, numeric, 1e-4)


def test_attention_parameter_gradients_match_fd():
    rng = np.random.default_rng(15)
    d, d_h = 4, 2
    p = random_head(rng, d, d_h)
    x = Tensor(rng.normal(size=(1, 3, d)))

    def build():
        out = attend(p, x, x, None)
        return sum_all(mul(out, out))

    with ComputationRecord() as rec:
        loss = build()
    grads = backward(rec, loss)
    for w in (p.w_q, p.w_k, p.w_v, p.w_o):
        numeric = fd_grad(lambda: build().item(), w, eps=1e-5)
        assert_close_rel(grads.grad(w).data, numeric, 1e-4, abs_floor=1e-6)
