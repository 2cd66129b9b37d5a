"""Command line entry point: ``jpd <command> --config C --seed S --out DIR``.

Stage commands (synth, simulate, analyze, tabulate, fit, report) each run
one pipeline stage inside ``--out``; ``run`` does all of them. Without
``--config`` a stage command reuses ``DIR/config.json`` when present and
otherwise the bundled exp1 reference config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .experiment import (STAGES, ConfigError, MissingIntermediatesError, StageError,
                         bundled_config, load_config, render_report, run_pipeline, run_staircases)

log = logging.getLogger("jpd")

COMMANDS = ("synth", "simulate", "analyze", "tabulate", "fit", "report", "run", "staircase")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jpd", description="Just-producible-difference experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} step" if name in STAGES else None)
        s.add_argument("--config", help="experiment config (JSON) or a bundled config name")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--workers", type=int, help="override the worker count")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args):
    path = args.config
    if path is None:
        own = os.path.join(args.out, "config.json")
        path = own if os.path.isfile(own) else bundled_config("exp1_reference")
    elif not os.path.isfile(path):
        path = bundled_config(path)
    cfg = load_config(path, seed=args.seed, out=args.out)
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            report = render_report(args.out)
        else:
            cfg = _config(args)
            if args.command == "staircase":
                files = run_staircases(cfg, args.out)
                print("\n".join(os.path.join(args.out, f) for f in files))
                return 0
            stages = STAGES if args.command == "run" else (args.command,)
            report = run_pipeline(cfg, args.out, stages)
    except (ConfigError, MissingIntermediatesError, StageError) as exc:
        print(f"jpd {args.command}: {exc}", file=sys.stderr)
        return 2
    if args.command in ("run", "report"):
        print(json.dumps(report.summary, indent=2))
    else:
        for f in report.outputs.get(args.command, []):
            print(os.path.join(args.out, f))
    return 0


if __name__ == "__main__":
    sys.exit(main())
