"""Command-line front end.

Examples
--------
::

    drunknown simulate-cb --n 1000,5000 --replicates 50 --out runs/cb
    drunknown modelfail --n 20,30,40 --replicates 200 --out runs/mf
    drunknown bandit-from-file table.csv --alpha 0.7 --out runs/uci
    drunknown modelwin --n 100 --replicates 1 --dump-dataset mw.csv
    drunknown evaluate mw.csv --environment modelwin

Fatal configuration errors print one JSON line prefixed with ``error:`` on
stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import sys

from .envs import read_dataset, write_dataset
from .errors import ConfigError, OPEError
from .harness import ESTIMATORS, ExperimentConfig, build_scenario, emit_report, load_config, run_experiment, run_replicate

_ENV_COMMANDS = {
    "simulate-cb": "synthetic-cb",
    "bandit-from-file": "classification",
    "modelwin": "modelwin",
    "modelfail": "modelfail",
}


def _shared(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="base seed (replicate j uses seed + j)")
    p.add_argument("--out", help="output directory for the report files")
    p.add_argument("--n", help="comma-separated sample sizes")
    p.add_argument("--replicates", type=int, help="datasets per sample size")
    p.add_argument("--alpha", type=float, help="logging mixing rate")
    p.add_argument("--gamma", type=float, help="discount factor (tabular domains)")
    p.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    p.add_argument("--ci-level", type=float, help="confidence level, e.g. 0.95")
    p.add_argument("--workers", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drunknown", description="Off-policy evaluation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in _ENV_COMMANDS:
        p = sub.add_parser(cmd, help=f"replicated experiment on the {_ENV_COMMANDS[cmd]} preset")
        _shared(p)
        if cmd == "bandit-from-file":
            p.add_argument("data_path", help="delimiter-separated features with a final integer label column")
        p.add_argument("--dump-dataset", metavar="PATH",
                       help="write the first replicate dataset (first n) to PATH instead of running")
    p = sub.add_parser("evaluate", help="run estimators on one dataset file")
    _shared(p)
    p.add_argument("dataset", help="dataset file written by --dump-dataset")
    p.add_argument("--environment", default="synthetic-cb",
                   help="preset defining the target policy, logging family and value features")
    return parser


def _config(args, environment: str) -> ExperimentConfig:
    base = ExperimentConfig(environment=environment)
    if args.config:
        base = load_config(args.config, base)
    if args.command in _ENV_COMMANDS:
        base = base.replace(environment=environment)
    changes = dict(seed=args.seed, out=args.out, replicates=args.replicates, alpha=args.alpha,
                   gamma=args.gamma, ci_level=args.ci_level, workers=args.workers)
    if args.n:
        changes["sizes"] = args.n
    if args.estimators:
        changes["estimators"] = args.estimators
    if getattr(args, "data_path", None):
        changes["data_path"] = args.data_path
    return base.replace(**changes)


def _error(kind: str, message: str, code: int) -> int:
    print("error: " + json.dumps({"type": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        environment = _ENV_COMMANDS.get(args.command, getattr(args, "environment", "synthetic-cb"))
        cfg = _config(args, environment)
        if args.command == "evaluate":
            return _evaluate(cfg, args.dataset)
        if args.dump_dataset:
            data = build_scenario(cfg).sample(cfg.sizes[0], cfg.seed)
            write_dataset(data, args.dump_dataset)
            print(args.dump_dataset)
            return 0
        report = run_experiment(cfg)
    except ConfigError as exc:
        return _error("ConfigError", str(exc), 2)
    except OSError as exc:
        return _error(type(exc).__name__, str(exc), 3)
    except OPEError as exc:
        return _error(type(exc).__name__, str(exc), 4)
    cols = ("estimator", "n", "mse", "rel_mse", "coverage", "excluded")
    print(" ".join(f"{c:>12}" for c in cols))
    for r in report.rows:
        print(f"{r.estimator:>12} {r.n:>12} {r.mse:>12.4e} {r.rel_mse:>12.4f} {r.coverage:>12.3f} {r.excluded:>12}")
    print(f"true value {report.true_value:.6g}")
    if cfg.out:
        try:
            emit_report(report, cfg.out)
        except OSError as exc:
            return _error(type(exc).__name__, str(exc), 3)
        print(f"report written to {cfg.out}")
    return 0


def _evaluate(cfg: ExperimentConfig, path) -> int:
    data = read_dataset(path)
    scenario = build_scenario(cfg)
    if data.horizon != scenario.horizon:
        raise ConfigError(f"dataset horizon {data.horizon} does not match the {cfg.environment} preset "
                          f"({scenario.horizon})")
    scenario.sampler = lambda n, seed: data
    for o in run_replicate(scenario, cfg.estimators, data.n, 0, cfg.seed, cfg.ci_level):
        row = {"estimator": o.estimator, "value": o.value, "ci_low": o.ci_low, "ci_high": o.ci_high}
        if not o.ok:
            row["error"] = o.error
        print(json.dumps(row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
