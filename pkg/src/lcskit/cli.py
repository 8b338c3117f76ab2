"""Command-line front end.

Exit codes: 0 when every mandatory check passes, 1 when a check fails, 2 for
configuration errors (unreadable or invalid scenario, bad flags).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from lcskit import expr
from lcskit.runner import run
from lcskit.scenario import ScenarioError, bundled_names, load_scenario, scaled

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
# subcommands that may run a scenario declared for another pipeline
_COMPATIBLE = {"darboux": {"darboux", "moser-flow"}, "moser-flow": {"darboux", "moser-flow"}}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 already; keep the message on stderr
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tolerance-scale", type=float, default=None, metavar="S",
                        help="multiply every tolerance by S")
    common.add_argument("--steps", type=int, default=None, help="override the RK4 step count")
    common.add_argument("--seed", type=int, default=None, help="override the sampling RNG seed")
    common.add_argument("--emit-data", nargs="?", const="", default=None, metavar="DIR",
                        help="write CSV plot data (and flow records) to DIR; default: beside the scenario file")
    common.add_argument("--timing", action="store_true", help="include wall-clock timing in the report")

    p = _Parser(prog="lcskit", description="Locally conformally symplectic geometry toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("check-lcs", "check d(theta) = 0, the LCS condition and nondegeneracy"),
        ("darboux", "conformal Darboux-Weinstein construction on patches, with gluing"),
        ("moser-flow", "same pipeline as darboux, emphasising flow diagnostics"),
        ("cotangent", "Haller-Rybicki form on a cotangent model"),
        ("weinstein", "Lagrangian neighbourhood pipeline into a cotangent model"),
        ("run", "run a scenario with the pipeline it declares"),
    ):
        sp = sub.add_parser(name, help=text, parents=[common])
        sp.add_argument("scenario", help="scenario file or bundled scenario name")
    sub.add_parser("list-scenarios", help="list bundled scenarios")
    return p


def _list() -> int:
    rows = []
    for name in bundled_names():
        sc = load_scenario(name)
        rows.append({"name": name, "pipeline": sc.pipeline, "dimension": sc.dimension,
                     "description": sc.description, "expect_failure": sc.expect.get("failure")})
    print(json.dumps({"scenarios": rows}, sort_keys=True))
    return EXIT_PASS


def _data_dir(flag: str, scenario_arg: str) -> Path:
    if flag:
        return Path(flag)
    p = Path(scenario_arg)
    return p.parent if p.is_file() else Path.cwd()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-scenarios":
        return _list()
    try:
        sc = load_scenario(args.scenario)
        pipeline = sc.pipeline if args.command == "run" else args.command
        if args.command != "run" and sc.pipeline not in _COMPATIBLE.get(pipeline, {pipeline}):
            raise ScenarioError(f"scenario declares pipeline {sc.pipeline!r}; use that subcommand or 'run'",
                                "pipeline", sc.source)
        sc = scaled(sc, args.tolerance_scale, args.steps, args.seed)
    except (ScenarioError, expr.ExprSyntaxError, OSError) as err:
        print(json.dumps({"error": {"stage": "config", "message": str(err)}, "pass": False}, sort_keys=True))
        return EXIT_CONFIG
    report = run(sc, pipeline, timing=args.timing)
    print(report.to_json())
    if args.emit_data is not None:
        for path in report.write_data(_data_dir(args.emit_data, args.scenario)):
            print(f"wrote {path}", file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
