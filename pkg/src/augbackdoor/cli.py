"""Command-line entry point: run experiments, pretty-print reports, emit curves."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import ConfigError, IngestionError, load_report, write_curves_csv
from .harness import run_experiment


def _read_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")


def _cmd_run(args) -> int:
    config = _read_config(args.config)
    report = run_experiment(config, out_dir=args.out)
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    return 0


def _cmd_baseline(args) -> int:
    config = _read_config(args.config)
    config["attack"] = "none"
    report = run_experiment(config, out_dir=args.out)
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    report = load_report(args.path)
    print(f"attack: {report.config['attack']}   seed: {report.seed}")
    for key in sorted(report.metrics):
        print(f"  {key:32s} {report.metrics[key]:.4f}")
    for name, curve in sorted(report.curves.items()):
        print(f"  curve {name}: {len(curve)} points")
    return 0


def _cmd_curves(args) -> int:
    report = load_report(args.path)
    write_curves_csv(report.curves, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augbackdoor")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment described by a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="directory for report.json and curves.csv")
    p_run.set_defaults(fn=_cmd_run)

    p_base = sub.add_parser("baseline", help="run the config with the attack disabled")
    p_base.add_argument("config")
    p_base.add_argument("--out", default=None)
    p_base.set_defaults(fn=_cmd_baseline)

    p_rep = sub.add_parser("report", help="pretty-print a saved report")
    p_rep.add_argument("path")
    p_rep.set_defaults(fn=_cmd_report)

    p_cur = sub.add_parser("curves", help="emit a saved report's curves as CSV")
    p_cur.add_argument("path")
    p_cur.add_argument("--out", required=True)
    p_cur.set_defaults(fn=_cmd_curves)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
