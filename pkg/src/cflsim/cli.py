"""Command line front end.

Subcommands
-----------
experiment      one full run (prep, federated pretraining, probes, reports)
ablate-pearson  the same run with and without column reordering
bench-loss      wall-clock comparison of the two similarity kernels
gradcheck       analytic-vs-finite-difference gradient verification
covdev          covariance deviation series over growing silo counts

Shared flags: ``--config`` (JSON file), ``--seed`` (overrides the config
seed), ``--out`` (output directory, default ``out``). Unknown config keys
are errors.

Exit codes: 0 success, 2 bad configuration, 3 unreadable or malformed
data, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CflError, ConfigError, DataError, TrainingDivergenceError
from .experiment import (
    ExperimentConfig,
    desk_profile,
    run_covdev,
    run_experiment,
    run_gradcheck,
    run_loss_bench,
    run_pearson_ablation,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config root must be an object, got {type(obj).__name__}")
    return obj


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_dict(_load_json(args.config))
    else:
        cfg = desk_profile()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _simple_config(args, allowed: dict) -> dict:
    """Load a flat subcommand config, filling defaults and rejecting
    unknown keys."""
    params = dict(allowed)
    if args.config:
        given = _load_json(args.config)
        unknown = set(given) - set(allowed)
        if unknown:
            raise ConfigError(f"unknown keys in config: {sorted(unknown)}")
        params.update(given)
    return params


def _cmd_experiment(args) -> int:
    summary = run_experiment(_experiment_config(args), args.out)
    print(f"dataset={summary.dataset} setting={summary.setting}")
    for tag in ("Base1", "CFL", "Base2"):
        print(f"mean_f1[{tag}] = {summary.mean_f1[tag]:.6f}")
    print(f"reports in {args.out}")
    return EXIT_OK


def _cmd_ablate_pearson(args) -> int:
    comparison = run_pearson_ablation(_experiment_config(args), args.out)
    print(json.dumps(comparison, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_bench_loss(args) -> int:
    params = _simple_config(args, {
        "embed_dim": 256, "k": 256, "iters": 200, "dataset_tag": "random"})
    res = run_loss_bench(args.out, embed_dim=params["embed_dim"],
                         k=params["k"], iters=params["iters"],
                         seed=args.seed or 0,
                         dataset_tag=params["dataset_tag"])
    print(f"t_dot_s={res.t_dot_s:.6g} t_cos_s={res.t_cos_s:.6g} "
          f"ratio={res.ratio:.3f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    params = _simple_config(args, {
        "d_in": 12, "hidden": 32, "embed": 16, "k": 8,
        "h": 1e-5, "threshold": 1e-4})
    res = run_gradcheck(seed=args.seed or 0, d_in=params["d_in"],
                        hidden=params["hidden"], embed=params["embed"],
                        k=params["k"], h=params["h"],
                        threshold=params["threshold"])
    for name, err in res.cases:
        print(f"{name}: max_rel_err={err:.3e}")
    print(f"{'PASS' if res.passed else 'FAIL'}: max {res.max_rel_err:.3e} "
          f"vs threshold {res.threshold:.1e} ({res.seconds:.2f}s)")
    return EXIT_OK if res.passed else 1


def _cmd_covdev(args) -> int:
    params = _simple_config(args, {
        "m_silos": 50, "delta_cap": 2.5, "seeds": 20,
        "rows_per_silo": 500, "features": 8, "drop_rate": 0.3,
        "dirty_silos": 1})
    res = run_covdev(args.out, m_silos=params["m_silos"],
                     delta_cap=params["delta_cap"], seeds=params["seeds"],
                     rows_per_silo=params["rows_per_silo"],
                     features=params["features"],
                     drop_rate=params["drop_rate"],
                     dirty_silos=params["dirty_silos"],
                     base_seed=args.seed or 0)
    first = res["mean_deviation"][0]
    last = res["mean_deviation"][-1]
    print(f"mean deviation: M=1 {first:.6f} -> M={res['m_silos']} {last:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cflsim",
        description=("Contrastive federated pretraining over vertically "
                     "partitioned tabular silos"),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "experiment": _cmd_experiment,
        "ablate-pearson": _cmd_ablate_pearson,
        "bench-loss": _cmd_bench_loss,
        "gradcheck": _cmd_gradcheck,
        "covdev": _cmd_covdev,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override")
        p.add_argument("--out", type=str, default="out",
                       help="output directory")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
