import numpy as np
import pytest

from lasformer import checkpoint
from lasformer.data import TaskSpec, generate_split, sample_batch
from lasformer.model import ModelConfig, Seq2Seq
from lasformer.optim import Adam, OptimConfig
from lasformer.sparsity import SelectionConfig
from lasformer.tensor import Tensor

SMALL = ModelConfig(n_layers=2, d=16, heads=2, ffn_dim=32, max_len=64, selection=SelectionConfig(d_s=4), seed=5)


def trained(steps=3):
    model = Seq2Seq(SMALL)
    opt = model.make_optimizer(OptimConfig(lr=1e-3, warmup=1))
    ds = generate_split(TaskSpec(task="copy", min_len=4, max_len=8, n_train=32), "train")
    for s in range(steps):
        model.train_step(sample_batch(ds, 4, 0, s), opt)
    return model, opt, ds


def test_round_trip_restores_everything(tmp_path):
    model, opt, _ = trained()
    checkpoint.save(tmp_path / "a.lasf", model, opt)
    back, back_opt = checkpoint.load(tmp_path / "a.lasf")
    assert back.step == model.step and back.config.to_dict() == model.config.to_dict()
    assert back.states == model.states
    assert back_opt.t == opt.t
    for name, p in model.params.items():
        np.testing.assert_array_equal(back.params[name].data, p.data)
        np.testing.assert_array_equal(back_opt.m[name], opt.m[name])
        np.testing.assert_array_equal(back_opt.v[name], opt.v[name])


def test_resave_is_byte_identical(tmp_path):
    model, opt, _ = trained()
    raw = checkpoint.to_bytes(model, opt)
    assert checkpoint.to_bytes(*checkpoint.from_bytes(raw)) == raw


def test_resumed_training_matches_uninterrupted():
    model, opt, ds = trained(steps=2)
    clone, clone_opt = checkpoint.from_bytes(checkpoint.to_bytes(model, opt))
    for s in range(2, 4):
        a, _ = model.train_step(sample_batch(ds, 4, 0, s), opt)
        b, _ = clone.train_step(sample_batch(ds, 4, 0, s), clone_opt)
        assert a.total == b.total
    for name in model.params:
        np.testing.assert_array_equal(model.params[name].data, clone.params[name].data)


def test_corrupt_files_rejected():
    model, opt, _ = trained(steps=1)
    raw = checkpoint.to_bytes(model, opt)
    for bad in (b"NOPE" + raw[4:], raw[:-8], raw[:10]):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.from_bytes(bad)


def test_model_only_checkpoint():
    model = Seq2Seq(SMALL)
    back, opt = checkpoint.from_bytes(checkpoint.to_bytes(model))
    assert opt is None and back.step == 0


def test_adam_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    cfg = OptimConfig(lr=1e-2, warmup=1, clip=0.0)
    ours = {"w": Tensor(w0.copy(), requires_grad=True)}
    adam = Adam(ours, cfg)
    ref = torch.tensor(w0.copy(), requires_grad=True)
    topt = torch.optim.Adam([ref], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    for g in grads:
        ours["w"].grad = g.copy()
        adam.step(ours)
        ref.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(ours["w"].data, ref.detach().numpy(), rtol=0, atol=1e-13)


def test_adam_warmup_and_clipping():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    adam = Adam(p, OptimConfig(lr=1.0, warmup=4, clip=1.0))
    assert adam.learning_rate() == 0.25
    p["w"].grad = np.array([3.0, 4.0])
    assert adam.step(p) == 5.0
    # first Adam step moves each coordinate by lr regardless of scale
    np.testing.assert_allclose(p["w"].data, [-0.25, -0.25], rtol=1e-6)
