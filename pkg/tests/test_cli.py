import csv
import json

import pytest

from lasformer import checkpoint, cli

TINY = """seed = 3
[model]
d = 16
heads = 2
ffn_dim = 32
max_len = 64
[selection]
d_s = 4
[task]
task = "copy"
min_len = 6
max_len = 12
n_train = 64
n_valid = 16
n_test = 16
[train]
steps = 6
eval_every = 3
checkpoint_every = 3
eval_samples = 8
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY)
    out = root / "run"
    assert cli.main(["train", "--config", str(root / "tiny.toml"), "--out", str(out)]) == 0
    return root, out


def test_train_writes_artifacts(run_dir):
    _, out = run_dir
    for rel in ("config.toml", "loss.csv", "sparsity.csv", "eval.csv", "sparsity_report.csv",
                "checkpoints/final.lasf", "checkpoints/step_0000003.lasf", "data/test.tsv"):
        assert (out / rel).exists(), rel
    with open(out / "loss.csv") as fp:
        rows = list(csv.DictReader(fp))
    assert [int(r["step"]) for r in rows] == list(range(6))
    with open(out / "sparsity.csv") as fp:
        traj = list(csv.DictReader(fp))
    assert {r["kind"] for r in traj} == {"encoder-self", "decoder-self", "cross"}
    assert all(0.01 <= float(r["k"]) <= 1.0 for r in traj)


def test_training_is_deterministic(run_dir, tmp_path):
    root, out = run_dir
    again = tmp_path / "again"
    assert cli.main(["train", "--config", str(root / "tiny.toml"), "--out", str(again)]) == 0
    assert (again / "loss.csv").read_bytes() == (out / "loss.csv").read_bytes()
    assert (again / "checkpoints/final.lasf").read_bytes() == (out / "checkpoints/final.lasf").read_bytes()


def test_resume_reproduces_uninterrupted_run(run_dir, tmp_path):
    root, out = run_dir
    resumed = tmp_path / "resumed"
    args = ["train", "--config", str(root / "tiny.toml"), "--out", str(resumed)]
    assert cli.main(args + ["--resume", str(out / "checkpoints/step_0000003.lasf")]) == 0
    assert (resumed / "checkpoints/final.lasf").read_bytes() == (out / "checkpoints/final.lasf").read_bytes()


def test_eval_reports_metrics(run_dir, tmp_path, capsys):
    _, out = run_dir
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoints/final.lasf"), "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert 0.0 <= metrics["token_accuracy"] <= 1.0 and metrics["n"] == 16
    assert metrics["attention"]["measured_vs_analytic"]["selection"] < 0.01


def test_sparsity_report_and_dump(run_dir, tmp_path, capsys):
    _, out = run_dir
    ckpt = str(out / "checkpoints/final.lasf")
    assert cli.main(["sparsity-report", "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
    header = (tmp_path / "sparsity_report.csv").read_text().splitlines()[0]
    assert header == "layer,encoder_self_pct,cross_pct,decoder_self_pct"
    assert cli.main(["dump-attention", "--checkpoint", ckpt, "--index", "2", "--out", str(tmp_path)]) == 0
    recs = json.loads((tmp_path / "attention_test_2.json").read_text())
    assert len(recs) == 3


def test_cost_verb(tmp_path, capsys):
    assert cli.main(["cost", "headline", "--out", str(tmp_path)]) == 0
    assert "7.08" in capsys.readouterr().out
    assert cli.main(["cost", "headline", "--override", "cost.k=1.0", "--override", "r=1"]) == 0
    assert capsys.readouterr().out.strip().endswith(",106.25")


def test_ablate_verb(run_dir, tmp_path):
    root, _ = run_dir
    assert cli.main(["ablate", "no-supervision", "--config", str(root / "tiny.toml"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "ablation_no-supervision.json").read_text())
    assert set(report) >= {"full", "no-supervision", "variant"}
    # the variant replays the full model's sparsity trajectory
    assert report["full"]["k"] == report["no-supervision"]["k"]


def test_seed_and_override_flags(run_dir, tmp_path):
    root, _ = run_dir
    out = tmp_path / "s"
    args = ["train", "--config", str(root / "tiny.toml"), "--out", str(out), "--seed", str(2**64 - 1),
            "--override", "train.steps=2", "--override", "train.sparsity_report=false"]
    assert cli.main(args) == 0
    text = (out / "config.toml").read_text()
    assert f"seed = {2**64 - 1}" in text and "steps = 2" in text
    model, _ = checkpoint.load(out / "checkpoints/final.lasf")
    assert model.step == 2


def test_error_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit):
        cli.main(["cost", "nonsense"])
    with pytest.raises(SystemExit):
        cli.main(["train", "--seed", "-1"])
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nbogus = 1\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "bad.toml:2: unknown key model.bogus" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.lasf")]) == 3
