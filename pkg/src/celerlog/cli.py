"""Command-line front end: the ``parse`` and ``eval`` subcommands."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__, evaluation, pipeline
from .llm import HttpBackend, MockBackend
from .model import CelerlogError, RouterConfig

API_KEY_ENV = "CELERLOG_API_KEY"


def build_parser() -> argparse.ArgumentParser:
    defaults = RouterConfig()
    parser = argparse.ArgumentParser(
        prog="celerlog",
        description="Hybrid log template extraction: statistical parsing for "
        "dense groups, LLM inference for sparse ones.",
    )
    parser.add_argument("--version", action="version", version=f"celerlog {__version__}")
    subcommands = parser.add_subparsers(dest="command", metavar="{parse,eval}")

    parse_cmd = subcommands.add_parser("parse", help="parse a log file into templates")
    parse_cmd.add_argument("--input", required=True, help="input log file")
    parse_cmd.add_argument(
        "--format", choices=("raw", "csv"), default="raw",
        help="raw lines or a structured CSV with a Content column",
    )
    parse_cmd.add_argument(
        "--header-pattern", default=None,
        help="regex with a named 'content' group that strips per-line headers",
    )
    parse_cmd.add_argument("--output", required=True, help="directory for the output files")
    parse_cmd.add_argument("--alpha", type=float, default=defaults.alpha,
                           help="anchor budget as a fraction of bucket size")
    parse_cmd.add_argument("--p-quantile", type=float, default=defaults.p_quantile,
                           help="singleton-ratio limit for threshold selection")
    parse_cmd.add_argument("--tau-step", type=float, default=defaults.tau_step,
                           help="similarity sweep increment")
    parse_cmd.add_argument("--bypass-length", type=int, default=defaults.bypass_length,
                           help="buckets of keys this short skip merging")
    parse_cmd.add_argument("--bypass-groups", type=int, default=defaults.bypass_group_count,
                           help="buckets with this few groups skip merging")
    parse_cmd.add_argument("--jobs", type=int, default=defaults.jobs,
                           help="worker count for routing and in-flight requests")
    parse_cmd.add_argument("--batch-size", type=int, default=defaults.llm_batch_size,
                           help="messages per LLM request")
    parse_cmd.add_argument("--backend", choices=("mock", "http"), default="mock",
                           help="inference backend for sparse groups")
    parse_cmd.add_argument("--endpoint", default=None,
                           help="chat-completions endpoint URL (http backend)")
    parse_cmd.add_argument("--model", default=None, help="model name (http backend)")

    eval_cmd = subcommands.add_parser("eval", help="score a parse against ground truth")
    eval_cmd.add_argument("--structured", required=True, help="structured.csv to score")
    eval_cmd.add_argument("--ground-truth", required=True,
                          help="CSV with LineId and EventTemplate columns")
    eval_cmd.add_argument("--report", required=True, help="where to write the JSON report")
    return parser


def _run_parse(args: argparse.Namespace) -> int:
    config = RouterConfig(
        alpha=args.alpha,
        p_quantile=args.p_quantile,
        tau_step=args.tau_step,
        bypass_length=args.bypass_length,
        bypass_group_count=args.bypass_groups,
        jobs=args.jobs,
        llm_batch_size=args.batch_size,
    )
    config.validate()
    if args.backend == "http":
        backend = HttpBackend(
            endpoint=args.endpoint or "",
            model=args.model or "",
            api_key=os.environ.get(API_KEY_ENV),
        )
    else:
        backend = MockBackend()
    result = pipeline.run(
        args.input,
        config=config,
        backend=backend,
        input_format=args.format,
        header_pattern=args.header_pattern,
        out_dir=args.output,
    )
    print(
        f"parsed {result.ingest.record_count} records into "
        f"{len(result.catalog)} templates "
        f"({result.routing.dense_records} dense, {result.routing.sparse_records} sparse) "
        f"in {result.ledger.wall_time_seconds:.2f}s"
    )
    return 0


def _run_eval(args: argparse.Namespace) -> int:
    predictions = evaluation.load_template_csv(args.structured)
    ground_truth = evaluation.load_template_csv(args.ground_truth)
    metrics = evaluation.evaluate(predictions, ground_truth)

    ledger = routing = None
    run_info = Path(args.structured).parent / "run.json"
    if run_info.is_file():
        try:
            info = json.loads(run_info.read_text(encoding="utf-8"))
            ledger = info.get("ledger")
            routing = info.get("routing")
        except (OSError, ValueError):
            pass
    evaluation.report(metrics, args.report, ledger=ledger, routing=routing)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        if args.command == "parse":
            return _run_parse(args)
        return _run_eval(args)
    except CelerlogError as exc:
        print(f"celerlog: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"celerlog: error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
