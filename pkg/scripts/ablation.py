"""Ablation table: every tracking method on every seed of the synthetic benchmark.

Writes the per-seed CSV (same format as ``bayes-d2t bench``) and prints the
mean PDQ and mAP of each method with 95% t-intervals over seeds.

    python3 scripts/ablation.py --config configs/benchmark.cfg --out ablation.csv
"""
import argparse
import math
from pathlib import Path

import numpy as np
from scipy import stats

from bayes_d2t import io
from bayes_d2t.cli import BENCH_HEADER, bench_rows
from bayes_d2t.config import RunConfig


def interval(values):
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return values.mean(), 0.0
    half = stats.t.ppf(0.975, values.size - 1) * values.std(ddof=1) / math.sqrt(values.size)
    return values.mean(), half


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/benchmark.cfg")
    parser.add_argument("--set", action="append", default=[], metavar="K=V")
    parser.add_argument("--out", required=True)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    cfg = RunConfig.load(args.config, args.set)
    rows = bench_rows(cfg)
    io.write_csv(Path(args.out), BENCH_HEADER, rows, force=args.force)

    by_method = {}
    for method, _, pdq, ap in rows:
        by_method.setdefault(method, ([], []))
        by_method[method][0].append(pdq)
        by_method[method][1].append(ap)
    print(f"{'method':<15}{'PDQ':>18}{'mAP':>18}")
    for method, (pdq, ap) in sorted(by_method.items(), key=lambda kv: -np.mean(kv[1][0])):
        (mp, hp), (ma, ha) = interval(pdq), interval(ap)
        print(f"{method:<15}{mp:>10.3f} ± {hp:.3f}{ma:>10.3f} ± {ha:.3f}")


if __name__ == "__main__":
    main()
