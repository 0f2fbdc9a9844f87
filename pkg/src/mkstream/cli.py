"""Command line entry point: ``mkstream run|sweep|validate``."""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, ExperimentPlan, parse_config, serialize_config
from .experiment import emit_summary, run_experiment, run_replicates, write_csvs, ExperimentResults


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mkstream", description="Video streaming simulator with (m,k)-firm shedding.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key=value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="base seed, overrides the file")
        return p

    run = common(sub.add_parser("run", help="run replicates of a single config"))
    run.add_argument("--reps", type=int, default=1, help="replicates (default 1)")
    run.add_argument("--out", metavar="DIR", help="write CSVs to DIR")
    run.add_argument("--jobs", type=int, default=1, help="worker processes")

    sw = common(sub.add_parser("sweep", help="run an experiment plan over lambda and strategies"))
    sw.add_argument("--reps", type=int, help="replicates per cell, overrides the file")
    sw.add_argument("--out", metavar="DIR", help="output directory, overrides the file")
    sw.add_argument("--jobs", type=int, default=1, help="worker processes")

    common(sub.add_parser("validate", help="check a config and print it normalized"))
    return parser


def _read(path: str | None) -> str:
    if path is None:
        return ""
    with open(path) as fh:
        return fh.read()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = _read(args.config)
        parsed = parse_config(text, plan=True if args.command == "sweep" else None)
        if args.command == "validate":
            sys.stdout.write(serialize_config(parsed))
            return 0
        if args.command == "sweep":
            plan = parsed
            changes = {}
            if args.seed is not None:
                changes["base"] = plan.base.replace(seed=args.seed)
            if args.reps is not None:
                changes["n_reps"] = args.reps
            if args.out is not None:
                changes["output_path"] = args.out
            plan = plan.replace(**changes)
            results = run_experiment(plan, jobs=args.jobs)
            emit_summary(results)
            return 0
        # run
        if isinstance(parsed, ExperimentPlan):
            raise ConfigError("plan keys are not valid for 'run'; use 'sweep'")
        config = parsed if args.seed is None else parsed.replace(seed=args.seed)
        if args.reps < 1:
            raise ConfigError(f"--reps={args.reps} outside accepted range [1,inf)")
        stats = run_replicates(config, args.reps, jobs=args.jobs)
        plan = ExperimentPlan(base=config, lambda_grid=(config.lam,), strategies=(config.strategy,),
                              n_reps=args.reps, output_path=args.out or "results")
        results = ExperimentResults(plan, {(config.lam, config.strategy): stats})
        if args.out:
            write_csvs(results, args.out)
        emit_summary(results)
        return 0
    except ConfigError as exc:
        print(f"mkstream: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mkstream: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
