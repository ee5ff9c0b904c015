"""Command-line entry point.

    dtsa run <config> [--set key=value ...] [--out DIR]
    dtsa sweep <config> --grid <file> [--set key=value ...]
    dtsa analyze <run-dir>
    dtsa validate <config>

``run`` exits 0 iff the inequality audit found no violations, 1 otherwise,
2 on configuration errors and 3 on divergence.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    ExperimentError,
    analyze_run,
    load_config,
    run_experiment,
    run_sweep,
    validate_experiment,
    write_json,
)

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_RUN = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="dtsa", description="Distributed two-time-scale experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log applied defaults and progress")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", help="write artifacts here instead of the hashed run directory")

    s = sub.add_parser("sweep", help="run a parameter grid")
    s.add_argument("config")
    s.add_argument("--grid", required=True, help="JSON object mapping keys to value lists")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    a = sub.add_parser("analyze", help="recompute the summary of a run directory")
    a.add_argument("run_dir")

    v = sub.add_parser("validate", help="check a config and its system against the assumptions")
    v.add_argument("config")
    return p


def _print_errors(exc):
    print("configuration error:", file=sys.stderr)
    for msg in exc.errors:
        print(f"  - {msg}", file=sys.stderr)


def _cmd_run(args):
    cfg = load_config(args.config, args.overrides)
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    res = run_experiment(cfg, out=args.out)
    exp = res.summary["exponents"]["mse_weighted"]["exponent"]
    print(res.path)
    print(f"violations={res.violations} Kstar={res.summary['Kstar']} exponent={exp}")
    return EXIT_OK if res.exit_code == 0 else EXIT_AUDIT


def _cmd_sweep(args):
    cfg = load_config(args.config, args.overrides)
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{args.grid}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"])
    except OSError as exc:
        raise ConfigError([f"cannot read {args.grid}: {exc.strerror}"])
    rows, path = run_sweep(cfg, grid)
    print(path)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"points={len(rows)} failed={failed}")
    return EXIT_OK if failed == 0 else EXIT_RUN


def _cmd_analyze(args):
    summary = analyze_run(args.run_dir)
    out = Path(args.run_dir) / "analysis.json"
    write_json(out, summary)
    print(out)
    return EXIT_OK


def _cmd_validate(args):
    cfg = load_config(args.config)
    report = validate_experiment(cfg)
    json.dump(report, sys.stdout, indent=2, sort_keys=True, default=float)
    print()
    return EXIT_OK if report["ok"] else EXIT_AUDIT


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "analyze": _cmd_analyze, "validate": _cmd_validate}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        _print_errors(exc)
        return EXIT_CONFIG
    except (ExperimentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
