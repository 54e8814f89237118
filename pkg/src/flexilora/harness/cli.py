"""Command-line entry point: ``flexilora <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, PolicySection, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

log = logging.getLogger("flexilora")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--precision", choices=("f32", "f64"), help="override float precision")
    p.add_argument("--out", type=Path, help="override the output directory")
    p.add_argument("--threads", type=int, help="evaluation worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexilora", description="Dynamic-rank LoRA laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("pretrain", "pretrain (or load) the frozen base model"),
        ("gen-tasks", "generate train/eval task data"),
        ("label", "label training samples easy/hard by zero-shot base performance"),
        ("train-router", "fit the difficulty router"),
        ("run", "full pipeline through the comparison report"),
    ):
        _common(sub.add_parser(name, help=text))
    for name, text in (("finetune", "fine-tune adapters under one policy"), ("eval", "fine-tune if needed, then evaluate")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--policy", choices=("lora", "dylora", "dylora+", "flexi"))
        p.add_argument("--rank", type=int, help="fixed rank (lora) or inference rank (dylora)")
        p.add_argument("--range", type=int, nargs=2, metavar=("LOW", "HIGH"), help="rank range for dylora / dylora+")
        p.add_argument("--rank-set", type=int, nargs="+", help="router rank table for flexi")
    p = sub.add_parser("report", help="re-render report tables from <out>/report.json")
    _common(p)
    p = sub.add_parser("selftest", help="run the built-in invariant suites")
    p.add_argument("--only", nargs="+", help="suite names to run")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision:
        cfg.precision = args.precision
    if args.out:
        cfg.out = str(args.out)
    if args.threads is not None:
        cfg.eval.threads = args.threads
    if getattr(args, "policy", None):
        p = PolicySection(kind=args.policy)
        if args.policy == "lora" and args.rank:
            p.rank = args.rank
        if args.range:
            p.low, p.high = args.range
        if args.policy == "dylora" and args.rank:
            p.inference_rank = args.rank
        if args.rank_set:
            cfg.router.rank_table = list(args.rank_set)
        cfg.policies = [p]
    return cfg.validate()


def cmd_selftest(args) -> int:
    from .selftest import SUITES, run_selftest

    unknown = [n for n in args.only or [] if n not in SUITES]
    if unknown:
        print(f"unknown suite(s): {', '.join(unknown)}; available: {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_CONFIG
    results = run_selftest(args.only)
    for c in results:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name:<24} {c.seconds:6.1f}s  {c.detail}")
    return EXIT_OK if all(c.ok for c in results) else EXIT_SELFTEST


def cmd_report(args) -> int:
    from .report import emit_report, load_rows

    cfg = resolve_config(args)
    src = Path(cfg.out) / "report.json"
    if not src.exists():
        print(f"no report.json in {cfg.out}; run `flexilora eval` or `flexilora run` first", file=sys.stderr)
        return EXIT_RUNTIME
    rows = load_rows(src)
    emit_report(rows, cfg.out)
    print((Path(cfg.out) / "report.txt").read_text(), end="")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import run_experiment

    cfg = resolve_config(args)
    until = {"run": "eval"}.get(args.command, args.command)
    result = run_experiment(cfg, until=until)
    if result.rows:
        print((result.out / "report.txt").read_text(), end="")
    else:
        print(f"stage {until} complete; artifacts in {result.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest(args)
        if args.command == "report":
            return cmd_report(args)
        return cmd_pipeline(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
