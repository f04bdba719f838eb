"""Command-line entry point: ``probe <experiment> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import GoldilocksError
from .experiments.config import EXPERIMENTS, ExperimentConfig, apply_overrides, default_config
from .experiments.plots import emit_plots
from .experiments.runner import run


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config file; unspecified keys take the experiment defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path, JSON value); repeatable")
    p.add_argument("--seed", type=int, help="base seed for every derived random stream")
    p.add_argument("--out-dir", help="directory for CSV, JSON and SVG outputs")
    p.add_argument("--threads", type=int, help="number of trials run concurrently")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="probe", description="Probe loss-landscape curvature on random hyperplanes and spheres.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "curvature-sweep": "restricted-Hessian statistics over radius and dimension",
        "contours": "train on hyperplane/sphere charts over radius and dimension",
        "loss-scaling": "loss at random anchors against radius, with power-law fit",
        "tr-vs-norm": "Tr(H)/rho and |H|/rho curves with crossings",
        "init-select": "curvature at initialization against early training accuracy",
        "radius-drift": "normalized radius during full-space training",
        "wick": "random-direction curvature moments and d-scaling",
        "stokes": "sphere-averaged Laplacian identity",
    }
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=helps[name])
    plot = sub.add_parser("plot", parents=[common], help="render SVG plots from result CSVs")
    plot.add_argument("csv", nargs="+", help="result CSV file(s)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    data = default_config(args.command).to_dict()
    if args.config:
        with open(args.config) as fh:
            user = json.load(fh)
        if user.get("experiment", args.command) != args.command:
            raise GoldilocksError(f"config is for {user['experiment']!r}, not {args.command!r}")
        data = _merge(data, user)
    data = apply_overrides(data, args.overrides)
    for key, value in (("seed", args.seed), ("out_dir", args.out_dir), ("threads", args.threads)):
        if value is not None:
            data[key] = value
    return ExperimentConfig.from_dict(data)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "params" else v
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            for path in args.csv:
                for out in emit_plots(path, args.out_dir):
                    print(out)
            return 0
        cfg = resolve_config(args)
        if args.dry_run:
            print(cfg.to_json())
            return 0
        summary = run(cfg)
    except (GoldilocksError, OSError) as exc:
        print(f"probe: error: {exc}", file=sys.stderr)
        return 2
    checks = summary.get("checks")
    if checks:
        for c in checks:
            print(f"{'PASS' if c['pass'] else 'FAIL'} {c['check']} = {c['value']:.6g}")
        return 0 if summary["all_pass"] else 1
    print(f"wrote results to {cfg.out_dir} (config {summary['config_hash']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
