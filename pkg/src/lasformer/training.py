"""Training runs: data preparation, the step loop, logging and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig
from .cost import measured_vs_analytic
from .data import PAD, Pair, generate, make_batch, sample_batch, write_dataset
from .evaluation import evaluate
from .model import Seq2Seq
from .optim import Adam
from .sparsity import sparsity_report, write_sparsity_report, write_trajectory
from .tensor import count_ops

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "nmt_loss", "supervision_loss", "total")


@dataclass
class RunResult:
    model: Seq2Seq
    optimizer: Adam
    losses: list[dict] = field(default_factory=list)
    trajectory: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


def build(config: ExperimentConfig) -> tuple[Seq2Seq, Adam]:
    model = Seq2Seq(config.model)
    return model, model.make_optimizer(config.optim)


def write_run_header(config: ExperimentConfig, out: Path, datasets: dict[str, list[Pair]]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config.to_toml(), encoding="utf-8")
    (out / "data").mkdir(exist_ok=True)
    for split, pairs in datasets.items():
        write_dataset(pairs, out / "data" / f"{split}.tsv")


def _read_rows(path: Path, before_step: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8", newline="") as fp:
        rows = list(csv.reader(fp))
    return [r for r in rows[1:] if int(r[0]) < before_step]


def run(
    config: ExperimentConfig,
    out: Path | None = None,
    resume: Path | None = None,
    k_schedule: list[dict] | None = None,
    datasets: dict[str, list[Pair]] | None = None,
) -> RunResult:
    """Train ``config.train.steps`` steps, optionally resuming from a checkpoint.

    ``k_schedule`` (one {(kind, leader): k} mapping per step) replaces the
    controller, so a variant can follow another run's sparsity trajectory.
    With ``out`` set, writes config.toml, data/, loss.csv, sparsity.csv,
    eval.csv, checkpoints/ and sparsity_report.csv.
    """
    config = config.resolved()
    config.validate()
    datasets = datasets or generate(config.task)
    train_pairs = datasets["train"]
    if resume is not None:
        model, optimizer = checkpoint.load(resume)
        if optimizer is None:
            raise checkpoint.CheckpointError("cannot resume from a checkpoint without optimizer state")
        if model.config != config.model:
            raise checkpoint.CheckpointError("checkpoint model config differs from the run config")
    else:
        model, optimizer = build(config)
    start = model.step
    result = RunResult(model, optimizer)

    loss_fp = traj_fp = eval_fp = None
    if out is not None:
        out = Path(out)
        write_run_header(config, out, datasets)
        (out / "checkpoints").mkdir(exist_ok=True)
        kept_loss = _read_rows(out / "loss.csv", start)
        kept_traj = _read_rows(out / "sparsity.csv", start)
        kept_eval = _read_rows(out / "eval.csv", start + 1)
        loss_fp = open(out / "loss.csv", "w", encoding="utf-8", newline="")
        traj_fp = open(out / "sparsity.csv", "w", encoding="utf-8", newline="")
        eval_fp = open(out / "eval.csv", "w", encoding="utf-8", newline="")
        loss_w = csv.writer(loss_fp, lineterminator="\n")
        loss_w.writerow(LOSS_COLUMNS)
        loss_w.writerows(kept_loss)
        write_trajectory([], traj_fp)
        csv.writer(traj_fp, lineterminator="\n").writerows(kept_traj)
        eval_w = csv.writer(eval_fp, lineterminator="\n")
        eval_w.writerow(("step", "token_accuracy", "sequence_accuracy"))
        eval_w.writerows(kept_eval)
    try:
        for step in range(start, config.train.steps):
            batch = sample_batch(train_pairs, config.optim.batch_size, config.seed, step)
            override = k_schedule[step] if k_schedule is not None else None
            lb, masses = model.train_step(batch, optimizer, k_override=override)
            if k_schedule is not None and step + 1 < len(k_schedule):
                # leave k where the replayed run had it after this step
                for key, k in k_schedule[step + 1].items():
                    model.states[key] = dataclasses.replace(model.states[key], k=k)
            loss_row = {"step": step, "nmt_loss": lb.nmt_loss, "supervision_loss": lb.supervision_loss, "total": lb.total}
            result.losses.append(loss_row)
            traj = [
                {"step": step, "kind": kind, "leader_layer": lead, "k": model.states[(kind, lead)].k, "captured_mass": m}
                for (kind, lead), m in sorted(masses.items())
            ]
            result.trajectory += traj
            if loss_fp is not None:
                loss_w.writerow([step] + [repr(float(loss_row[c])) for c in LOSS_COLUMNS[1:]])
                write_trajectory(traj, traj_fp, header=False)
            done = step + 1
            if done % config.train.eval_every == 0 or done == config.train.steps:
                metrics = evaluate(model, datasets["valid"][: config.train.eval_samples], config.train.eval_batch_size)
                result.evals.append({"step": done, **metrics})
                log.info("step %d loss %.4f valid token accuracy %.4f", done, lb.nmt_loss, metrics["token_accuracy"])
                if eval_fp is not None:
                    eval_w.writerow([done, repr(metrics["token_accuracy"]), repr(metrics["sequence_accuracy"])])
            if out is not None and (done % config.train.checkpoint_every == 0 or done == config.train.steps):
                checkpoint.save(out / "checkpoints" / f"step_{done:07d}.lasf", model, optimizer)
    finally:
        for fp in (loss_fp, traj_fp, eval_fp):
            if fp is not None:
                fp.close()
    if out is not None:
        checkpoint.save(out / "checkpoints" / "final.lasf", model, optimizer)
        if config.train.sparsity_report:
            rows = sparsity_report(collect_records(model, datasets["test"][: config.train.eval_samples]))
            with open(out / "sparsity_report.csv", "w", encoding="utf-8", newline="") as fp:
                write_sparsity_report(rows, fp)
    return result


def k_schedule_from(trajectory: list[dict]) -> list[dict]:
    """Per-step {(kind, leader): k before the step} from a logged trajectory.

    Has one entry more than there are steps, holding the final values.
    """
    by_step: dict[int, dict] = {}
    for row in trajectory:
        by_step.setdefault(row["step"], {})[(row["kind"], row["leader_layer"])] = row["k"]
    steps = sorted(by_step)
    schedule = []
    previous: dict = {}
    for s in steps:
        # k logged after step s is the value used at step s + 1
        schedule.append(dict(previous))
        previous = by_step[s]
    # trailing entry: the values left after the last step
    schedule.append(dict(previous))
    return schedule


def collect_records(model: Seq2Seq, pairs: list[Pair], batch_size: int = 32):
    records = []
    for i in range(0, len(pairs), batch_size):
        b = make_batch(pairs[i : i + batch_size], PAD)
        records += model.forward(b.src, b.tgt_in, "infer", capture=True).records()
    return records


def attention_costs(model: Seq2Seq, pairs: list[Pair]) -> dict:
    """Counted teacher-forced infer-mode attention work against the analytic model.

    Examples run one at a time so no padding enters the counts.
    ``measured_vs_analytic`` evaluates the closed form at each group's
    learned k; ``measured_vs_realized`` uses the realized keep fractions
    and is zero unless the counters miss work.
    """
    nominal, realized = [], []
    kept: dict[str, list[float]] = {}
    with count_ops() as counter:
        for pair in pairs:
            b = make_batch([pair], PAD)
            result = model.forward(b.src, b.tgt_in, "infer")
            nominal += model.cost_sites(result, nominal=True)
            realized += model.cost_sites(result)
            for s in result.sites:
                m = s.structural if s.mask is None else s.mask
                kept.setdefault(s.kind, []).append(m.sum() / m.size)
    dense = sum(2 * c.n * c.N * c.n_keys * c.d for c in nominal)
    ops = {label: counter[label] for label in counter.by_label if label.startswith(("attn.logits", "attn.weighted_sum", "select."))}
    report = {
        "op_counts": ops,
        "dense_attention_ops": dense,
        "realized_k": {kind: float(np.mean(v)) for kind, v in kept.items()},
    }
    if model.config.selective and "select.logits" in counter:
        keys = ("selection", "masked_attention", "attention")
        dev = measured_vs_analytic(counter, nominal)
        report["measured_vs_analytic"] = {k: dev[k] for k in keys}
        report["measured_vs_realized"] = {k: measured_vs_analytic(counter, realized)[k] for k in keys}
        report["attention_cost_ratio"] = (dev["measured"]["selection"] + dev["measured"]["masked_attention"]) / dense
    else:
        report["attention_cost_ratio"] = (counter["attn.logits"] + counter["attn.weighted_sum"]) / dense
    return report
