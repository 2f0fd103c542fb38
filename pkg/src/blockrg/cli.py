"""Command-line driver: `verify <suite>` writes a JSON report, `summary <paths...>` aggregates reports.

`rg-step`, `last-step`, `small-factors` and `kprime` are shortcuts for verifying one named suite."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .suites import SUITES, ExperimentConfig, SuiteError, run_suite


def load_config(path: str | None, suite: str, seed: int | None) -> ExperimentConfig:
    data = {}
    if path:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise SuiteError("config must be a JSON object")
    name = data.get("suite", suite)
    if name != suite:
        raise SuiteError(f"config is for suite {name!r}, not {suite!r}")
    unknown = set(data) - {"suite", "seed", "params"}
    if unknown:
        raise SuiteError(f"unknown config keys {sorted(unknown)}")
    cfg = ExperimentConfig(suite, int(data.get("seed", 0)), dict(data.get("params", {})))
    if seed is not None:
        cfg.seed = seed
    return cfg


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def emit_summary(reports: list[dict]) -> tuple[str, dict]:
    """Table with failing suites first, then by suite name; and the same content as JSON."""
    if not reports:
        raise SuiteError("no reports to summarize")
    rows = sorted(reports, key=lambda r: (r["pass"], r["suite"], r.get("seed", 0)))
    doc = {
        "suites": len(rows),
        "passing": sum(r["pass"] for r in rows),
        "rows": [
            {
                "suite": r["suite"],
                "seed": r.get("seed", 0),
                "pass": r["pass"],
                "passed": r["passed"],
                "total": r["total"],
                "worst_margin": r.get("worst_margin"),
                "runtime": r.get("runtime"),
                "failures": [c["name"] for c in r["checks"] if not c["pass"]],
            }
            for r in rows
        ],
    }
    lines = [f"{doc['passing']}/{doc['suites']} suites pass"]
    for row in doc["rows"]:
        status = "PASS" if row["pass"] else "FAIL"
        margin = row["worst_margin"]
        margin = "-" if margin is None else f"{margin:.3g}"
        line = f"{status}  {row['suite']:<20} {row['passed']}/{row['total']} checks  worst margin {margin}"
        if row["runtime"] is not None:
            line += f"  {row['runtime']:.1f}s"
        lines.append(line)
        lines.extend(f"      failed: {name}" for name in row["failures"])
    return "\n".join(lines) + "\n", doc


SHORTCUTS = {
    "rg-step": "z-preservation",
    "last-step": "last-step",
    "small-factors": "small-factors",
    "kprime": "kprime",
}


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with seed and params")
    p.add_argument("--out", help="report path (stdout if omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--timing", action="store_true", help="include the runtime (reports are then not byte-stable)")


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="blockrg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run one verification suite")
    v.add_argument("suite", choices=sorted(SUITES))
    _run_args(v)
    for name, suite in SHORTCUTS.items():
        _run_args(sub.add_parser(name, help=f"same as `verify {suite}`"))
    s = sub.add_parser("summary", help="aggregate JSON reports")
    s.add_argument("paths", nargs="+")
    s.add_argument("--json", dest="json_out", help="also write the machine-readable summary here")
    sub.add_parser("list", help="list suites and their default parameters")
    args = ap.parse_args(argv)

    try:
        if args.command == "list":
            for name, (cls, _) in sorted(SUITES.items()):
                print(name, json.dumps(ExperimentConfig(name).validate().__dict__, default=list, sort_keys=True))
            return 0
        if args.command in SHORTCUTS:
            args.suite = SHORTCUTS[args.command]
        if args.command == "verify" or args.command in SHORTCUTS:
            cfg = load_config(args.config, args.suite, args.seed)
            report = run_suite(cfg).to_dict(timing=args.timing)
            text = dumps(report)
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)
            return 0 if report["pass"] else 1
        reports = [json.loads(Path(p).read_text()) for p in args.paths]
        text, doc = emit_summary(reports)
        sys.stdout.write(text)
        if args.json_out:
            Path(args.json_out).write_text(dumps(doc))
        return 0 if doc["passing"] == doc["suites"] else 1
    except (SuiteError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
