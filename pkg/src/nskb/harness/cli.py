"""Command-line entry point: ``nskb run|grid|validate|info-gain``.

Exit codes: 0 on success, 1 when the configuration is invalid, 2 when some
cells failed.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from ..design import info_gain
from ..errors import ConfigError, NSKBError
from ..kernels import ActionSet, kernel_feature_map, kernel_from_dict
from .config import expand_grid, load_config
from .runner import grid_search, run_experiment

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def _add_config_args(p):
    p.add_argument("config", help="YAML experiment file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. T=2000 or algorithms.ADA-OPKB.params.c0=2")
    p.add_argument("--seeds", type=int, nargs="+", help="replace the seed list")
    p.add_argument("--output", help="replace the output directory")
    p.add_argument("--workers", type=int, help="worker processes (default from NSKB_WORKERS)")


def _load(args):
    overrides = list(args.overrides)
    if args.seeds:
        overrides.append("seeds=[" + ",".join(map(str, args.seeds)) + "]")
    if args.output:
        overrides.append(f"output={args.output}")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nskb", description="Non-stationary kernel bandit experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every algorithm over every seed and write CSVs")
    _add_config_args(p)
    p = sub.add_parser("grid", help="evaluate parameter grids and write a ranked leaderboard")
    _add_config_args(p)
    p = sub.add_parser("validate", help="check a config without running it")
    _add_config_args(p)

    p = sub.add_parser("info-gain", help="maximum information gain on random unit-sphere actions")
    p.add_argument("--kernel", default="rbf", choices=["linear", "rbf", "matern"])
    p.add_argument("--lengthscale", type=float, default=0.2)
    p.add_argument("--nu", type=float, default=2.5)
    p.add_argument("-N", type=int, default=20, help="number of actions")
    p.add_argument("-d", type=int, default=5, help="action dimension")
    p.add_argument("-T", type=int, default=1000, help="horizon")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    return parser


def _info_gain(args) -> int:
    spec = {"type": args.kernel}
    if args.kernel != "linear":
        spec["lengthscale"] = args.lengthscale
    if args.kernel == "matern":
        spec["nu"] = args.nu
    actions = ActionSet.unit_sphere(args.N, args.d, np.random.default_rng(args.seed))
    phi = kernel_feature_map(kernel_from_dict(spec), actions)
    res = info_gain(phi, args.T, args.sigma, tol=args.tol)
    print(f"gamma={res.gamma:.10g} gap={res.gap:.3g} iterations={res.iterations} converged={res.converged}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "info-gain":
        try:
            return _info_gain(args)
        except NSKBError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        points = sum(len(expand_grid(a)) for a in cfg.algorithms)
        print(f"ok: {cfg.name}, {len(cfg.algorithms)} algorithm(s), {points} parameter point(s), "
              f"{len(cfg.seeds)} seed(s), {points * len(cfg.seeds)} cell(s)")
        return EXIT_OK
    runner = run_experiment if args.command == "run" else grid_search
    res = runner(cfg, workers=args.workers)
    print(f"wrote {res.summary_path}")
    for c in res.failures:
        print(f"failed: {c.label} seed {c.seed}: {c.error}", file=sys.stderr)
    return EXIT_PARTIAL if res.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
