import io
import math

import numpy as np
import pytest

from lasformer import attention as att
from lasformer import kernels
from lasformer import tensor as T
from lasformer.errors import DegenerateRowError, ShapeError
from lasformer.tensor import Tensor, count_ops, finite_difference_check

BACKENDS = kernels.available_backends()


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def row_stochastic(*shape, seed=0):
    x = np.exp(rand(*shape, seed=seed))
    return x / x.sum(axis=-1, keepdims=True)


def test_compiled_backend_is_built():
    assert "cython" in BACKENDS


@pytest.mark.parametrize("backend", BACKENDS)
def test_topk_keeps_largest_entries(backend):
    A = np.array([[0.1, 0.4, 0.2, 0.05, 0.25]])
    mask = att.topk_mask(A, 0.4, 1, backend=backend)
    np.testing.assert_array_equal(mask, [[False, True, False, False, True]])


@pytest.mark.parametrize("backend", BACKENDS)
def test_topk_floor_and_ceiling(backend):
    A = row_stochastic(3, 20)
    assert (att.topk_mask(A, 0.07, 10, backend=backend).sum(axis=-1) == 10).all()
    # 0.07 * 100 must stay 7 despite floating point
    assert (att.topk_mask(row_stochastic(2, 100), 0.07, 1, backend=backend).sum(axis=-1) == 7).all()
    assert (att.topk_mask(A, 1.0, 10, backend=backend).sum(axis=-1) == 20).all()


@pytest.mark.parametrize("backend", BACKENDS)
def test_topk_ties_go_to_lowest_index(backend):
    A = np.full((1, 6), 1 / 6)
    np.testing.assert_array_equal(att.topk_mask(A, 0.5, 1, backend=backend), [[1, 1, 1, 0, 0, 0]])


@pytest.mark.parametrize("backend", BACKENDS)
def test_topk_respects_structure(backend):
    n = 6
    causal = np.tri(n, dtype=bool)
    A = att.selection_scores(
        Tensor(rand(n, 8)), Tensor(rand(n, 8, seed=1)), att.SelectionLayer.init(8, 4, np.random.default_rng(0)), causal
    )
    mask = att.topk_mask(A, 0.5, 2, causal, backend=backend)
    assert not (mask & ~causal).any()
    expected = att.kept_counts(np.arange(1, n + 1), 0.5, 2)
    np.testing.assert_array_equal(mask.sum(axis=-1), expected)


def test_kept_counts_clamp():
    np.testing.assert_array_equal(att.kept_counts([1, 5, 40, 200], 0.05, 10), [1, 5, 10, 10])
    np.testing.assert_array_equal(att.kept_counts([1000], 0.05, 10), [50])
    with pytest.raises(ValueError):
        att.kept_counts([3], 0.0, 1)


def test_selection_layer_validates():
    with pytest.raises(ShapeError):
        att.SelectionLayer(Tensor(np.zeros((4, 8))), Tensor(np.zeros((4, 8))))
    with pytest.raises(ShapeError):
        att.SelectionLayer(Tensor(np.zeros((8, 4))), Tensor(np.zeros((8, 3))))


def test_selection_scores_row_stochastic_and_counted():
    layer = att.SelectionLayer.init(16, 4, np.random.default_rng(0))
    with count_ops() as c:
        A = att.selection_scores(Tensor(rand(2, 5, 16)), Tensor(rand(2, 7, 16, seed=1)), layer)
    np.testing.assert_allclose(A.data.sum(axis=-1), 1.0, atol=1e-12)
    assert c["select.logits"] == 2 * 5 * 7 * 4


def test_straight_through_value_and_gradient():
    A = Tensor(row_stochastic(3, 4), requires_grad=True)
    mask = att.topk_mask(A, 0.5, 1)
    st = att.straight_through(mask, A)
    np.testing.assert_array_equal(st.data, mask.astype(float))
    w = rand(3, 4, seed=5)
    T.backward((st * w).sum())
    np.testing.assert_array_equal(A.grad, w)


def test_straight_through_finite_difference_with_frozen_mask():
    x = rand(3, 5, seed=2)
    A0 = T.softmax_rows(Tensor(x)).data
    mask = att.topk_mask(A0, 0.6, 1)
    q, k, v = rand(3, 4, seed=3), rand(5, 4, seed=4), rand(5, 2, seed=5)

    def f(logits):
        A = T.softmax_rows(logits)
        soft = att.straight_through(mask, A, anchor=A0)
        out, _ = att.selective_attention(Tensor(q), Tensor(k), Tensor(v), mask, "train", soft_mask=soft)
        return (out * np.arange(6.0).reshape(3, 2)).sum()

    assert finite_difference_check(f, x, h=1e-6) < 1e-4


def test_all_ones_mask_matches_full_attention_bitwise():
    q, k, v = (Tensor(rand(2, 5, 4, seed=s)) for s in range(3))
    full, _ = att.full_attention(q, k, v)
    sel, _ = att.selective_attention(q, k, v, np.ones((2, 5, 5), bool), "train")
    np.testing.assert_array_equal(full.data, sel.data)


@pytest.mark.parametrize("backend", BACKENDS)
def test_train_and_infer_paths_agree(backend):
    q, k, v = (Tensor(rand(12, 6, seed=s)) for s in range(3))
    A = T.softmax_rows(Tensor(rand(12, 12, seed=4))).data
    mask = att.topk_mask(A, 0.5, 1)
    a, wa = att.selective_attention(q, k, v, mask, "train")
    b, wb = att.selective_attention(q, k, v, mask, "infer", backend=backend)
    np.testing.assert_allclose(a.data, b.data, atol=1e-9, rtol=0)
    np.testing.assert_allclose(wa.data, wb, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_infer_counts_only_kept_positions(backend):
    heads, n, dh = 2, 10, 3
    q, k, v = (Tensor(rand(1, heads, n, dh, seed=s)) for s in range(3))
    mask = att.topk_mask(row_stochastic(1, n, n), 0.3, 1)
    with count_ops() as c:
        att.selective_attention(q, k, v, mask, "infer", backend=backend)
    kept = int(mask.sum()) * heads
    assert c["attn.logits"] == kept * dh
    assert c["attn.weighted_sum"] == kept * dh


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_kept_position_copies_value_row(backend):
    v = rand(4, 3, seed=1)
    mask = np.eye(4, dtype=bool)[[2, 0, 3, 1]]
    for mode in ("train", "infer"):
        out, _ = att.selective_attention(Tensor(rand(4, 3)), Tensor(rand(4, 3, seed=2)), Tensor(v), mask, mode, backend=backend)
        np.testing.assert_array_equal(out.data, v[[2, 0, 3, 1]])


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_empty_row_is_degenerate(mode):
    mask = np.ones((3, 3), bool)
    mask[1] = False
    with pytest.raises(DegenerateRowError):
        att.selective_attention(Tensor(rand(3, 2)), Tensor(rand(3, 2)), Tensor(rand(3, 2)), mask, mode)


def test_backends_agree_on_random_inputs():
    rng = np.random.default_rng(3)
    for trial in range(20):
        n_q, n_k, heads = rng.integers(1, 9), rng.integers(1, 12), rng.integers(1, 4)
        scores = rng.random((n_q, n_k))
        adm = rng.random((n_q, n_k)) < 0.7
        adm[:, 0] = True
        kept = att.kept_counts(adm.sum(axis=1), rng.uniform(0.05, 1), int(rng.integers(1, 4)))
        masks = [kernels.topk_rows(scores, adm, kept, backend=b) for b in BACKENDS]
        for m in masks[1:]:
            np.testing.assert_array_equal(m, masks[0])
        q, k, v = rng.normal(size=(3, heads, n_q, 4)), rng.normal(size=(heads, n_k, 4)), rng.normal(size=(heads, n_k, 4))
        outs = [kernels.sparse_attention(q[0], k, v, masks[0][None], heads, backend=b) for b in BACKENDS]
        for o in outs[1:]:
            np.testing.assert_allclose(o[0], outs[0][0], atol=1e-13)
            assert o[2] == outs[0][2]


def test_fixed_window_mask():
    m = att.fixed_window_mask(6, 6, 2, "encoder-self")
    np.testing.assert_array_equal(m.sum(axis=1), [2, 3, 3, 3, 3, 2])
    dec = att.fixed_window_mask(6, 6, 4, "decoder-self")
    assert not np.triu(dec, 1).any()
    cross = att.fixed_window_mask(3, 9, 2, "cross")
    np.testing.assert_array_equal(np.argwhere(cross[2])[:, 0], [7, 8])
    with pytest.raises(ValueError):
        att.fixed_window_mask(3, 3, 0, "cross")


def test_structural_mask_padding_and_causality():
    valid = np.array([[True, True, True, False]])
    s = att.structural_mask(valid, valid, causal=True)
    assert not s[0, :, 3].any()
    assert not np.triu(s[0], 1).any()
    assert s[0, 3, :3].all()  # padded query rows stay well defined


def test_attention_record_json_round_trip():
    rec = att.AttentionRecord("cross", 0, row_stochastic(2, 3), row_stochastic(2, 3, seed=1), np.array([[1, 0, 1], [0, 1, 1]], bool))
    buf = io.StringIO()
    att.dump_records([rec], buf)
    buf.seek(0)
    (back,) = att.load_records(buf)
    assert back.kind == "cross" and back.rows == 2 and back.cols == 3
    np.testing.assert_array_equal(back.full_attention, rec.full_attention)
    np.testing.assert_array_equal(back.mask, rec.mask)


def test_mask_gate_gradient_flows_only_on_kept():
    soft = Tensor(np.array([[1.0, 0.0, 1.0]]), requires_grad=True)
    gate = att.mask_gate(soft)
    assert gate.data[0, 0] == 0.0 and gate.data[0, 1] == T.SENTINEL
    weights = T.softmax_rows(Tensor(np.zeros((1, 3))) + gate)
    T.backward((weights * np.array([[1.0, 5.0, 2.0]])).sum())
    assert soft.grad[0, 1] == 0.0
    assert math.isfinite(soft.grad[0, 0])
