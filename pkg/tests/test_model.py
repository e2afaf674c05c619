import dataclasses

import numpy as np
import pytest

from lasformer import model as M
from lasformer.cost import measured_vs_analytic
from lasformer.data import EOS, TaskSpec, generate_split, make_batch, sample_batch
from lasformer.errors import ConfigError, InputError
from lasformer.optim import OptimConfig
from lasformer.sparsity import SelectionConfig
from lasformer.tensor import backward, count_ops

SMALL = M.ModelConfig(n_layers=2, d=16, heads=2, ffn_dim=32, max_len=64, selection=SelectionConfig(d_s=4, k_init=0.6), seed=1)
DS = generate_split(TaskSpec(task="copy", min_len=12, max_len=20, n_train=64), "train")


def batch(n=4, step=0):
    return sample_batch(DS, n, 0, step)


def test_manifest_layout():
    names = [n for n, _ in M.parameter_manifest(SMALL)]
    assert len(names) == len(set(names))
    sel = [n for n in names if n.startswith("sel.")]
    # r=2 over 2 layers: one leader per attention kind
    assert sorted(sel) == sorted(f"sel.{k}.0.{w}" for k in ("encoder-self", "decoder-self", "cross") for w in ("wq", "wk"))
    dense = dataclasses.replace(SMALL, selective=False)
    assert not any(n.startswith("sel.") for n, _ in M.parameter_manifest(dense))
    assert not any(n.endswith(".bk") for n in names)


def test_leaders_follow_group_size():
    cfg = dataclasses.replace(SMALL, n_layers=4, selection=SelectionConfig(d_s=4, r=2))
    assert M.leaders(cfg) == [0, 2]
    assert M.leaders(dataclasses.replace(cfg, selection=SelectionConfig(d_s=4, r=1))) == [0, 1, 2, 3]


def test_init_is_seeded():
    a, b = M.init_parameters(SMALL), M.init_parameters(SMALL)
    c = M.init_parameters(dataclasses.replace(SMALL, seed=2))
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert not np.array_equal(a["enc.0.self.wq"].data, c["enc.0.self.wq"].data)


def test_config_validation_and_ablation():
    for bad in (dict(d=15), dict(dropout=1.0), dict(selection=SelectionConfig(d_s=32))):
        with pytest.raises(ConfigError):
            M.Seq2Seq(dataclasses.replace(SMALL, **bad))
    assert M.ablate(SMALL, "no-supervision").selection.alpha == 0.0
    assert M.ablate(SMALL, "fixed-window").selection.selector == "fixed-window"
    assert M.ablate(SMALL, "no-reparam").selection.straight_through is False
    with pytest.raises(ConfigError):
        M.ablate(SMALL, "nothing")
    assert M.ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_rejects_out_of_range_ids():
    m = M.Seq2Seq(SMALL)
    with pytest.raises(InputError):
        m.forward(np.array([[70, 2]]), np.array([[1, 5]]))


def test_one_selection_per_kind_and_followers_share_mask():
    m = M.Seq2Seq(SMALL)
    b = batch()
    with count_ops() as c:
        res = m.forward(b.src, b.tgt_in, "train")
    B, S = b.src.shape
    T = b.tgt_in.shape[1]
    assert c["select.logits"] == B * SMALL.selection.d_s * (S * S + T * T + T * S)
    by_kind = {}
    for s in res.sites:
        by_kind.setdefault(s.kind, []).append(s)
    for sites in by_kind.values():
        assert [s.layer for s in sites] == [0, 1]
        assert sites[0].selection is not None and sites[1].selection is None
        np.testing.assert_array_equal(sites[0].mask, sites[1].mask)


def test_train_and_infer_logits_agree():
    m = M.Seq2Seq(SMALL)
    b = batch()
    a = m.forward(b.src, b.tgt_in, "train").logits.data
    c = m.forward(b.src, b.tgt_in, "infer").logits.data
    valid = b.tgt_valid
    np.testing.assert_allclose(a[valid], c[valid], atol=1e-9, rtol=0)


def test_dense_degeneration_bitwise():
    sel = SelectionConfig(d_s=4, k_init=1.0, alpha=0.0, r=1)
    lasf = M.Seq2Seq(dataclasses.replace(SMALL, dropout=0.0, selection=sel))
    dense = M.Seq2Seq(dataclasses.replace(SMALL, dropout=0.0, selection=sel, selective=False))
    b = batch()
    np.testing.assert_array_equal(lasf.forward(b.src, b.tgt_in).logits.data, dense.forward(b.src, b.tgt_in).logits.data)


def supervision_grads(m, b, frozen=None):
    m.zero_grad()
    res = m.forward(b.src, b.tgt_in, "train", frozen=frozen)
    backward(res.supervision)
    return res, {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in m.params.items()}


def test_teacher_is_detached():
    m = M.Seq2Seq(dataclasses.replace(SMALL, dropout=0.0))
    b = batch()
    res, live = supervision_grads(m, b)
    _, frozen = supervision_grads(m, b, res.freeze())
    assert any(np.any(g) for n, g in live.items() if n.startswith("sel."))
    for n in live:
        np.testing.assert_array_equal(live[n], frozen[n])


def test_symmetric_kl_does_reach_the_teacher():
    sel = dataclasses.replace(SMALL.selection, symmetric_kl=True)
    m = M.Seq2Seq(dataclasses.replace(SMALL, dropout=0.0, selection=sel))
    b = batch()
    res, live = supervision_grads(m, b)
    _, frozen = supervision_grads(m, b, res.freeze())
    assert any(not np.array_equal(live[n], frozen[n]) for n in live)


def test_no_reparam_without_supervision_freezes_selection():
    cfg = M.ablate(dataclasses.replace(SMALL, selection=dataclasses.replace(SMALL.selection, alpha=0.0)), "no-reparam")
    m = M.Seq2Seq(cfg)
    before = {n: p.data.copy() for n, p in m.params.items() if n.startswith("sel.")}
    opt = m.make_optimizer(OptimConfig(lr=1e-2, warmup=1))
    for s in range(3):
        m.train_step(batch(step=s), opt)
    for n, arr in before.items():
        np.testing.assert_array_equal(m.params[n].data, arr)


def test_train_step_moves_k_and_parameters():
    m = M.Seq2Seq(dataclasses.replace(SMALL, selection=SelectionConfig(d_s=4)))
    opt = m.make_optimizer(OptimConfig(lr=1e-3, warmup=1))
    before = m.params["out.w"].data.copy()
    lb, masses = m.train_step(batch(), opt)
    assert set(masses) == set(m.states)
    assert all(v == pytest.approx(1.0) for v in masses.values())
    assert all(s.k == pytest.approx(0.999) for s in m.states.values())
    assert not np.array_equal(before, m.params["out.w"].data)
    assert m.step == 1 and lb.total == pytest.approx(lb.nmt_loss + 0.01 * lb.supervision_loss)


def test_k_override_replaces_controller():
    m = M.Seq2Seq(SMALL)
    opt = m.make_optimizer(OptimConfig())
    key = ("cross", 0)
    m.train_step(batch(), opt, k_override={key: 0.3})
    assert m.states[key].k == 0.3


def test_incremental_decode_matches_full_recompute():
    m = M.Seq2Seq(dataclasses.replace(SMALL, dropout=0.0))
    opt = m.make_optimizer(OptimConfig(lr=3e-3, warmup=1))
    for s in range(30):
        m.train_step(batch(8, s), opt)
    src = make_batch(DS[:6]).src
    fast = m.greedy_decode(src, 24, "infer")
    slow = m.greedy_decode(src, 24, "train")
    assert fast == slow
    assert all(len(row) <= 24 and EOS not in row for row in fast)


def test_cost_sites_match_counted_work():
    m = M.Seq2Seq(SMALL)
    b = batch()
    with count_ops() as c:
        res = m.forward(b.src, b.tgt_in, "infer")
    dev = measured_vs_analytic(c, m.cost_sites(res))
    assert dev["selection"] < 1e-12 and dev["attention"] < 1e-12


def test_records_and_masses():
    m = M.Seq2Seq(SMALL)
    b = batch(2)
    res = m.forward(b.src, b.tgt_in, "infer", capture=True)
    recs = res.records()
    assert sorted({r.kind for r in recs}) == ["cross", "decoder-self", "encoder-self"]
    assert len(recs) == 3 * 2
    for r in recs:
        assert r.mask.any(axis=1).all()
        np.testing.assert_allclose(r.full_attention.sum(axis=1), 1.0, atol=1e-12)
    masses = res.group_masses()
    assert all(0.0 < v <= 1.0 for v in masses.values())
