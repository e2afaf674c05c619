"""Command-line entry point: ``lasformer <verb> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, config as cfg
from .attention import dump_records
from .cost import TABLES, sweep, write_csv
from .data import PAD, SPLITS, make_batch, read_dataset
from .errors import ConfigError, InputError, LasformerError
from .evaluation import evaluate, is_far_binding, value_recall
from .model import ABLATIONS, ablate
from .sparsity import sparsity_report, write_sparsity_report
from .training import attention_costs, collect_records, k_schedule_from, run

log = logging.getLogger("lasformer")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value <= cfg.SEED_MAX:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2**64 - 1], got {text}")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (flat TOML)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=_u64, help="root seed (unsigned 64-bit)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override a config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lasformer", description="Selective-attention transformer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints and logs")
    _common(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="greedy-decode a split and report accuracy")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data", type=Path, help="dataset TSV (default: <run>/data/<split>.tsv)")
    p.add_argument("--mode", choices=("infer", "train"), default="infer")

    p = sub.add_parser("cost", help="analytic attention cost tables")
    _common(p)
    p.add_argument("table", choices=TABLES)

    p = sub.add_parser("dump-attention", help="export attention records of one sample as JSON")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--data", type=Path)

    p = sub.add_parser("ablate", help="train a variant and the full model with the same budget")
    _common(p)
    p.add_argument("variant", choices=ABLATIONS)

    p = sub.add_parser("sparsity-report", help="kept-token percentages per layer and attention kind")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--data", type=Path)
    p.add_argument("--samples", type=int, default=200)
    return parser


def load_config(args) -> cfg.ExperimentConfig:
    config = cfg.load(args.config) if args.config else cfg.ExperimentConfig()
    if args.override:
        config = cfg.apply_overrides(config, args.override)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=str(args.out))
    config = config.resolved()
    config.validate()
    return config


def _dataset(args):
    path = args.data or args.checkpoint.resolve().parent.parent / "data" / f"{args.split}.tsv"
    if args.data is None and args.split not in SPLITS:
        raise FileNotFoundError(f"unknown split {args.split!r}; choose one of {SPLITS}")
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset split not found: {path}")
    return read_dataset(path)


def _write_json(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_train(args) -> int:
    config = load_config(args)
    out = Path(config.out_dir)
    result = run(config, out, resume=args.resume)
    k_min = config.selection.k_min
    bad = [s for s in result.model.states.values() if not k_min - 1e-12 <= s.k <= 1.0]
    if bad:
        log.error("sparsity ratio left its bounds: %s", bad)
        return 1
    required = ["config.toml", "loss.csv", "sparsity.csv", "checkpoints/final.lasf"]
    if config.train.sparsity_report:
        required.append("sparsity_report.csv")
    missing = [r for r in required if not (out / r).exists()]
    if missing:
        log.error("missing artifacts: %s", missing)
        return 1
    return 0


def cmd_eval(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    pairs = _dataset(args)
    metrics = evaluate(model, pairs, mode=args.mode)
    metrics.update({"split": args.split, "mode": args.mode, "step": model.step})
    metrics["k"] = {f"{kind}/{lead}": s.k for (kind, lead), s in sorted(model.states.items())}
    if args.mode == "infer":
        metrics["attention"] = attention_costs(model, pairs)
    _write_json(metrics, args.out / "metrics.json" if args.out else None)
    return 0


def cmd_cost(args) -> int:
    overrides = {}
    for item in args.override:
        key, _, raw = item.partition("=")
        key = key.strip().removeprefix("cost.")
        overrides[key] = cfg._parse_scalar(raw.strip())
    rows = sweep(args.table, overrides)
    write_csv(rows, sys.stdout)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / f"cost_{args.table}.csv", "w", encoding="utf-8", newline="") as fp:
            write_csv(rows, fp)
    return 0


def cmd_dump_attention(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    pairs = _dataset(args)
    if not 0 <= args.index < len(pairs):
        raise InputError(f"sample index {args.index} out of range [0, {len(pairs)})")
    b = make_batch([pairs[args.index]], PAD)
    records = model.forward(b.src, b.tgt_in, "infer", capture=True).records()
    path = (args.out or Path(".")) / f"attention_{args.split}_{args.index}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        dump_records(records, fp)
    print(path)
    return 0


def far_recall(model, config, pairs) -> float | None:
    if config.task.task != "longrange-recall":
        return None
    far = [p for p in pairs if is_far_binding(p[0], len(p[1]), config.model.n_layers, config.selection.window_length)]
    if not far:
        return None
    return float(value_recall(model, far).mean())


def run_ablation(config: cfg.ExperimentConfig, variant: str, out: Path | None = None) -> dict:
    """Full model and one variant trained with identical seeds, data and k trajectory."""
    full = run(config, None if out is None else out / "full")
    variant_config = dataclasses.replace(config, model=ablate(config.model, variant))
    schedule = k_schedule_from(full.trajectory)
    var = run(variant_config, None if out is None else out / variant, k_schedule=schedule)
    from .data import generate

    test = generate(config.task)["test"]
    report = {"variant": variant, "task": config.task.task, "steps": config.train.steps}
    for name, res in (("full", full), (variant, var)):
        metrics = evaluate(res.model, test)
        costs = attention_costs(res.model, test)
        report[name] = {
            "token_accuracy": metrics["token_accuracy"],
            "sequence_accuracy": metrics["sequence_accuracy"],
            "far_binding_recall": far_recall(res.model, config, test),
            "attention_cost_pct": 100 * costs["attention_cost_ratio"],
            "k": {f"{kind}/{lead}": s.k for (kind, lead), s in sorted(res.model.states.items())},
        }
    return report


def cmd_ablate(args) -> int:
    config = load_config(args)
    out = Path(config.out_dir)
    report = run_ablation(config, args.variant, out)
    _write_json(report, out / f"ablation_{args.variant}.json")
    return 0


def cmd_sparsity_report(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    pairs = _dataset(args)[: args.samples]
    rows = sparsity_report(collect_records(model, pairs))
    write_sparsity_report(rows, sys.stdout)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "sparsity_report.csv", "w", encoding="utf-8", newline="") as fp:
            write_sparsity_report(rows, fp)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "dump-attention": cmd_dump_attention,
    "ablate": cmd_ablate,
    "sparsity-report": cmd_sparsity_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except LasformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
