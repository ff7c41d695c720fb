"""Command line: ``implicitq verify|run|score|plot``."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

from implicitq.experiments import (
    ExperimentConfig,
    ScoringError,
    run_experiment,
    score_runs,
    write_plot_script,
    write_scores,
)
from implicitq.tabular import ParameterError
from implicitq.verify import SUITES, run_suite


def _verify(args):
    suites = SUITES if args.suite == "all" else (args.suite,)
    reports = [run_suite(s, quick=args.quick, mutation=args.mutation) for s in suites]
    doc = {"passed": all(r.passed for r in reports), "suites": [r.to_dict() for r in reports]}
    text = json.dumps(doc, indent=2)
    if args.output:
        Path(args.output).write_text(text)
    print(text)
    return 0 if doc["passed"] else 1


def _run(args):
    config = ExperimentConfig.load(args.config)
    out, failed = run_experiment(config, args.output, args.workers)
    print(f"{out}: {len(config.cells()) - failed} cells ok, {failed} failed")
    return 1 if failed else 0


def _score(args):
    try:
        table = score_runs(args.run_dir, args.random_return, args.baseline_return)
    except ScoringError as exc:
        print(f"scoring failed: {exc}", file=sys.stderr)
        return 2
    path = write_scores(args.run_dir, table)
    print(f"random {table.random_return:.2f}, baseline {table.baseline_return:.2f} "
          f"({table.baseline_label})")
    for row in table.summary():
        print("{variant:>14} a={alpha:<5g} tau={tau:<7g} final score mean {mean:7.3f} "
              "median {median:7.3f} std {std:6.3f} (n={n})".format(**row))
    print(path)
    return 0


def _plot(args):
    script = write_plot_script(args.run_dir)
    print(script)
    if args.render:
        return subprocess.run([sys.executable, str(script)]).returncode
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="implicitq", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run a check battery, print a JSON report")
    v.add_argument("suite", choices=SUITES + ("all",))
    v.add_argument("--quick", action="store_true", help="smaller sample counts")
    v.add_argument("--mutation", action="store_true",
                   help="theorem1 only: run MD-VI with a corrupted alpha (must fail)")
    v.add_argument("--output", help="also write the report to this file")
    v.set_defaults(fn=_verify)

    r = sub.add_parser("run", help="execute an experiment config (YAML)")
    r.add_argument("config")
    r.add_argument("--output", help="override the config's output_dir")
    r.add_argument("--workers", type=int, help="worker processes (default: $IMPLICITQ_WORKERS or 1)")
    r.set_defaults(fn=_run)

    s = sub.add_parser("score", help="baseline-normalized scores of a deep run directory")
    s.add_argument("run_dir")
    s.add_argument("--random-return", type=float)
    s.add_argument("--baseline-return", type=float)
    s.set_defaults(fn=_score)

    pl = sub.add_parser("plot", help="emit (and optionally render) a plot script")
    pl.add_argument("run_dir")
    pl.add_argument("--render", action="store_true", help="execute the script (needs matplotlib)")
    pl.set_defaults(fn=_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
