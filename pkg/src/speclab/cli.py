"""Command-line entry point: ``speclab run|sweep|histogram|verify|gen-model``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, models
from .config import ConfigError, load_config, load_sweep
from .verify import SUITES


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML config file")
    p.add_argument("--out", help=f"output directory (default: config output_dir, then ${harness.OUT_DIR_ENV}, "
                                 f"then ./{harness.DEFAULT_OUT_DIR})")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--verbose-rounds", action="store_true", help="keep per-round records in report.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speclab", description="Speculative decoding simulator with adaptive draft stopping.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    _add_common(p)

    p = sub.add_parser("sweep", help="run the cross product of a sweep file's axes")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")

    p = sub.add_parser("histogram", help="accepted-count histograms from a report.json")
    p.add_argument("report", help="report.json written with --verbose-rounds")
    p.add_argument("--out", help="also write the table as CSV to this file")

    p = sub.add_parser("verify", help="run a built-in oracle suite")
    p.add_argument("suite", choices=sorted(SUITES))

    p = sub.add_parser("gen-model", help="write a random target or a derived draft model file")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--concentration", type=float, default=1.0 / 256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--derive-from", help="base model file; writes a derived draft instead of a target")
    p.add_argument("--mode", choices=models.DRAFT_MODES, default="partial-knowledge")
    p.add_argument("--strength", type=float, default=0.5)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = harness.resolve_out_dir(args.out, cfg)
    csv_path, json_path = harness.run_experiment(cfg, out, args.verbose_rounds)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    sweep = load_sweep(args.config)
    if args.seed is not None:
        sweep = replace(sweep, base=replace(sweep.base, seed=args.seed))
    if args.workers < 1:
        raise ConfigError("--workers", "must be >= 1")
    out = harness.resolve_out_dir(args.out, sweep.base)
    csv_path, json_path = harness.run_sweep(sweep, out, args.workers, args.verbose_rounds)
    print(f"{sweep.n_points} points; wrote {csv_path} and {json_path}")
    return 0


def _cmd_histogram(args: argparse.Namespace) -> int:
    path = Path(args.report)
    if not path.is_file():
        raise FileNotFoundError(f"report not found: {path}")
    rows = harness.accepted_histograms(json.loads(path.read_text(encoding="utf-8")))
    for r in rows:
        print(f"{r.config_id} {r.method} L={r.max_draft_length} rounds={r.n_rounds} "
              f"mean={r.mean:.4f} std={r.std:.4f}")
        peak = max(r.counts) or 1
        for k, c in enumerate(r.counts):
            print(f"  {k:>3} {c:>8} {'#' * round(40 * c / peak)}")
    if args.out:
        Path(args.out).write_text(harness.histogram_csv(rows), encoding="utf-8")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    checks = SUITES[args.suite]()
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{args.suite}: {len(checks) - failed}/{len(checks)} passed")
    return 1 if failed else 0


def _cmd_gen_model(args: argparse.Namespace) -> int:
    if args.derive_from:
        base = models.load(args.derive_from)
        model = models.derive_draft(base, models.DerivedDraftSpec(args.mode, args.strength, args.seed))
    else:
        model = models.random_target(args.vocab_size, args.order, args.concentration, args.seed)
    models.save(model, args.out)
    print(f"wrote {model!r} to {args.out}")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "histogram": _cmd_histogram,
    "verify": _cmd_verify,
    "gen-model": _cmd_gen_model,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, models.ModelFileError, harness.MissingRoundsError, ValueError) as e:
        print(f"speclab {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
