#!/usr/bin/env python3
"""Run the desk-scale evaluation suite over every misalignment setting.

For each setting and seed this trains the federated encoder, probes it
against the pooled-data and local-data references, and prints a compact
table of support-weighted F1 means plus per-silo win counts. Artifacts
for every run land under --out/<setting>_seed<k>/.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cflsim.experiment import SETTINGS, desk_profile, run_experiment


def silo_wins(summary) -> int:
    per_silo = summary.deltas["per_silo"]
    return sum(1 for e in per_silo
               if e["cfl_vs_base1"] > e["base2_vs_base1"])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="desk_suite_runs",
                    help="directory for per-run artifacts")
    ap.add_argument("--seeds", type=int, default=3,
                    help="number of seeds per setting (0..N-1)")
    ap.add_argument("--settings", nargs="+", default=list(SETTINGS),
                    choices=list(SETTINGS))
    args = ap.parse_args(argv)

    print(f"{'setting':<12} {'seed':<4} {'Base1':>7} {'CFL':>7} "
          f"{'Base2':>7} {'wins':>6}")
    for setting in args.settings:
        means = {"Base1": 0.0, "CFL": 0.0, "Base2": 0.0}
        for seed in range(args.seeds):
            cfg = desk_profile(seed=seed, setting=setting)
            out_dir = Path(args.out) / f"{setting}_seed{seed}"
            summary = run_experiment(cfg, out_dir)
            wins = silo_wins(summary)
            print(f"{setting:<12} {seed:<4} "
                  f"{summary.mean_f1['Base1']:>7.3f} "
                  f"{summary.mean_f1['CFL']:>7.3f} "
                  f"{summary.mean_f1['Base2']:>7.3f} {wins:>4}/5")
            for tag in means:
                means[tag] += summary.mean_f1[tag]
        n = args.seeds
        print(f"{setting:<12} mean {means['Base1'] / n:>7.3f} "
              f"{means['CFL'] / n:>7.3f} {means['Base2'] / n:>7.3f}\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
