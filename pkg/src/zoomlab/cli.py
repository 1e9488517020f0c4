"""Command-line entry points.

Subcommands: ``forge`` (corpus only), ``train`` (one arm), ``run`` (full
matrix), ``eval`` (score a frozen checkpoint), ``report`` (regenerate the
summary and CSV from persisted logs).  Exit status 0 on success, 1 on
missing inputs or invalid configuration, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, ContractError, NumericError
from .evalkit import evaluate, write_passk_csv, write_problems_jsonl, write_report_meta
from .policy import load_checkpoint
from .qaforge import forge_corpus, write_corpus, write_report
from .rng import stable_seed
from .rollout import RolloutLimits
from .runner import (
    make_forge_config,
    make_rollout_limits,
    make_scene_spec,
    load_config,
    regenerate_report,
    resolve_config,
    run_experiment,
)
from .scenegen import scene_rulebase
from .vocab import build_vocabulary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zoomlab",
        description="Staged-training laboratory for tool-using policies on "
        "synthetic glyph-grid search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
        p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the global seed")

    common(sub.add_parser("forge", help="forge the text-QA corpus only"))
    train = sub.add_parser("train", help="run a single arm")
    common(train)
    train.add_argument("--arm", required=True, help="arm name from the config")
    run = sub.add_parser("run", help="run the full experiment matrix")
    common(run)
    run.add_argument(
        "--parallel",
        type=int,
        default=0,
        metavar="N",
        help="run arms in N parallel processes (default: sequential)",
    )
    evaluate_cmd = sub.add_parser("eval", help="evaluate a frozen checkpoint")
    common(evaluate_cmd)
    evaluate_cmd.add_argument("--checkpoint", required=True, help="checkpoint file")
    report = sub.add_parser("report", help="regenerate summary and CSV from logs")
    report.add_argument("--out", required=True, help="existing experiment directory")
    return parser


def _load_resolved(args: argparse.Namespace) -> dict:
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    raw = load_config(args.config) if args.config else {}
    return resolve_config(raw, seed_override=args.seed)


def _cmd_forge(args: argparse.Namespace) -> int:
    config = _load_resolved(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = make_scene_spec(config)
    result = forge_corpus(scene_rulebase(spec), make_forge_config(config))
    write_corpus(result.records, out / "corpus.jsonl")
    write_report(result.report, out / "forge_report.txt")
    print(
        f"forged {len(result.records)} records "
        f"({result.report['rejected_total']} candidates rejected) -> {out}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_resolved(args)
    checkpoint_path = Path(args.checkpoint)
    if not checkpoint_path.exists():
        print(f"error: checkpoint not found: {checkpoint_path}", file=sys.stderr)
        return 1
    params = load_checkpoint(checkpoint_path)

    spec = make_scene_spec(config)
    rulebase = scene_rulebase(spec)
    vocabulary = build_vocabulary(spec, rulebase)
    if len(vocabulary) != params.dims.vocab_size:
        raise ConfigError(
            f"checkpoint vocabulary size {params.dims.vocab_size} does not match "
            f"the configured scene vocabulary ({len(vocabulary)} tokens)"
        )
    limits = make_rollout_limits(config)
    evaluation = config["evaluation"]
    eval_limits = RolloutLimits(
        tool_budget=limits.tool_budget,
        max_model_tokens=limits.max_model_tokens,
        temperature=float(evaluation["temperature"]),
    )
    heldout = config["pools"]["heldout"]
    report = evaluate(
        params,
        vocabulary,
        spec,
        int(heldout["base"]),
        int(heldout["size"]),
        eval_limits,
        tuple(int(k) for k in evaluation["k_list"]),
        int(evaluation["n_samples"]),
        stable_seed(int(config["seed"]), "evaluation"),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_passk_csv(report, out / "passk.csv")
    write_problems_jsonl(report, out / "problems.jsonl")
    write_report_meta(report, out / "report_meta.json")
    headline = ", ".join(f"pass@{k}={report.estimates[k]:.4f}" for k in report.ks)
    print(f"{headline}, greedy@1={report.greedy_pass1:.4f} -> {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    try:
        if args.command == "forge":
            return _cmd_forge(args)
        if args.command == "train":
            config = _load_resolved(args)
            run_experiment(config, args.out, only_arms=[args.arm])
            return 0
        if args.command == "run":
            config = _load_resolved(args)
            run_experiment(config, args.out, parallel_workers=args.parallel)
            return 0
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "report":
            print(regenerate_report(args.out), end="")
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ContractError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
