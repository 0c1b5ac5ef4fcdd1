"""Command-line front end: ``hybridglue run|list|certify``."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, ModelNotFound, PipelineError
from .models import list_models
from .scenario import run_scenario


def _parser():
    p = argparse.ArgumentParser(prog="hybridglue", description="Glued observers and trackers for hybrid systems")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--out", help="output directory (overrides output_dir in the config)")
        sp.add_argument("--seed", type=int, help="sampler seed (overrides the config)")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads for sweep entries")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. sim.t_end=5 (repeatable)")
        sp.add_argument("--plots", action="store_true", help="also render PNG figures (needs matplotlib)")

    run = sub.add_parser("run", help="run a scenario config")
    run.add_argument("config")
    common(run)
    cert = sub.add_parser("certify", help="run the certification suite on a bundle")
    cert.add_argument("model_id")
    common(cert)
    sub.add_parser("list", help="list bundle ids with their parameters")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.verb == "list":
        text = list_models()
        if text:
            print(text)
        return 0
    config = args.config if args.verb == "run" else {"model_id": args.model_id, "mode": "certify"}
    try:
        result = run_scenario(config, out_dir=args.out, seed=args.seed, overrides=args.override,
                              jobs=args.jobs, plots=args.plots)
    except (ConfigError, ModelNotFound) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"artifacts: {result.out_dir}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
