"""Command-line experiment driver.

    napmc run --config cfg.json [--seed N] [--out DIR] [--threads N]
    napmc sweep --config cfg.json --axis name=v1,v2,... [--repeats N]
                [--seed N] [--out DIR] [--threads N]
"""

import argparse
import json
import sys
from pathlib import Path

from .experiment import ExperimentConfig, run_experiment, sweep, emit_results


def _load_config(args):
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    if args.threads is not None:
        raw["threads"] = args.threads
    return ExperimentConfig.from_dict(raw)


def _parse_axis(text):
    name, _, values = text.partition("=")
    if not values:
        raise argparse.ArgumentTypeError(
            "axis must look like name=v1,v2,...")
    parsed = []
    for v in values.split(","):
        try:
            parsed.append(json.loads(v))
        except json.JSONDecodeError:
            parsed.append(v)
    return name, parsed


def build_parser():
    parser = argparse.ArgumentParser(
        prog="napmc",
        description="Parallel MCMC aggregation experiments with invertible "
                    "density approximations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None)
        cmd.add_argument("--threads", type=int, default=None)
        if name == "sweep":
            cmd.add_argument("--axis", required=True, type=_parse_axis)
            cmd.add_argument("--repeats", type=int, default=1)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = _load_config(args)
    if args.command == "run":
        artifacts = run_experiment(cfg)
        out = emit_results(artifacts, cfg.output_dir)
        for method in cfg.methods:
            print(artifacts.reports[method].csv_row())
        print(f"wrote {out}/metrics.csv")
    else:
        axis_name, axis_values = args.axis
        rows, failures = sweep(cfg, axis_name, axis_values,
                               repeats=args.repeats, out_dir=cfg.output_dir)
        print(f"{len(rows)} runs completed, {len(failures)} failed; "
              f"wrote {cfg.output_dir}/sweep.csv")
        if failures:
            for failure in failures:
                print(f"  failed: {failure}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
