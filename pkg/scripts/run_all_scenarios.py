"""Run every bundled scenario and print a pass/fail table.

Negative fixtures count as expected when they fail on the check named in
their ``[expect]`` table.  With ``--out DIR`` each JSON report is written to
``DIR/<name>.json``.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from lcskit.runner import run
from lcskit.scenario import bundled_names, load_scenario


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="run all bundled scenarios")
    ap.add_argument("names", nargs="*", help="subset of scenario names")
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args(argv)

    names = args.names or bundled_names()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    surprises = 0
    print(f"{'scenario':<26} {'pipeline':<10} {'result':<6} {'seconds':>8}  note")
    for name in names:
        sc = load_scenario(name)
        start = time.perf_counter()
        rep = run(sc)
        secs = time.perf_counter() - start
        expected_failure = sc.expect.get("failure")
        if expected_failure:
            ok = not rep.passed and expected_failure in rep.report.failed()
            note = f"expected failure {expected_failure!r}" + ("" if ok else f", got {rep.report.failed()}")
        else:
            ok = rep.passed
            note = "" if ok else f"failed {rep.report.failed()}"
        surprises += not ok
        print(f"{name:<26} {rep.pipeline:<10} {'ok' if ok else 'FAIL':<6} {secs:8.1f}  {note}")
        if args.out:
            (args.out / f"{name}.json").write_text(rep.to_json() + "\n")
    return 1 if surprises else 0


if __name__ == "__main__":
    sys.exit(main())
