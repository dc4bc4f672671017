"""Command line entry point: ``cichlid-sim bench <name> ...``."""

from __future__ import annotations

import argparse
import inspect
import json
import sys

from .bench.experiments import EXPERIMENTS
from .errors import MachineFileError
from .machine import load_machine, parse_size, preset_names


def _convert(text: str, default):
    if isinstance(default, tuple):
        sample = default[0] if default else ""
        return tuple(_convert(t.strip(), sample) for t in text.split(",") if t.strip())
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    return parse_size(text)


def experiment_params(name: str) -> dict[str, object]:
    sig = inspect.signature(EXPERIMENTS[name])
    return {k: p.default for k, p in sig.parameters.items() if k not in ("machine", "seed")}


def parse_overrides(name: str, pairs: list[str]) -> dict[str, object]:
    params = experiment_params(name)
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in params:
            raise SystemExit(f"unknown parameter {key!r} for {name}; known: {', '.join(params)}")
        out[key] = _convert(value, params[key])
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cichlid-sim", description="Explicit physical memory management simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    b = sub.add_parser("bench", help="run one experiment")
    b.add_argument("name", choices=sorted(EXPERIMENTS))
    b.add_argument("--machine", default="ivybridge", help="machine file or preset name")
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--csv", required=True, help="output CSV path")
    b.add_argument("--trace", help="write the invocation trace as JSON lines")
    b.add_argument("--plot", help="write an SVG plot (needs matplotlib)")
    b.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override an experiment parameter; lists are comma separated")
    b.add_argument("-q", "--quiet", action="store_true", help="only print failed checks")
    sub.add_parser("list", help="list experiments, their parameters and machine presets")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        for name in sorted(EXPERIMENTS):
            params = ", ".join(f"{k}={v}" for k, v in experiment_params(name).items())
            print(f"{name}: {params}")
        print("machines:", ", ".join(preset_names()))
        return 0
    try:
        machine = load_machine(args.machine)
    except (OSError, MachineFileError) as exc:
        print(f"cichlid-sim: {exc}", file=sys.stderr)
        return 2
    report = EXPERIMENTS[args.name](machine, args.seed, **parse_overrides(args.name, args.set))
    report.write_csv(args.csv)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for trace in report.traces:
                for rec in trace.records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if args.plot:
        from .bench.plot import plot_report

        plot_report(report, args.plot)
    for c in report.checks:
        if not (args.quiet and c.passed):
            detail = f" ({c.detail})" if c.detail and not c.passed else ""
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}{detail}")
    failed = len(report.failures())
    print(f"{args.name}: {len(report.checks) - failed}/{len(report.checks)} checks passed")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
