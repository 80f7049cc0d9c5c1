"""Sweep guidance scale s and restart budget N with the analytic oracles.

Usage: python3 scripts/ablation.py [--runs 1000] [--gamma 0.5] [--tau 0.25] [--csv out.csv]
"""

import argparse
import csv
import sys
import time

import numpy as np

from diffuae.data import AnalyticDenoiser, QuadraticClassifier, ring_centers
from diffuae.diffusion import make_schedule
from diffuae.guidance import GuidanceConfig, run_attacks


def asr(den, clf, sched, runs: int, seed: int, **knobs) -> float:
    y = np.arange(runs) % len(clf.centers)
    res = run_attacks(den, clf, y, (y + 1) % len(clf.centers), GuidanceConfig(**knobs), sched, seed=seed, chunk=250)
    return float(np.mean([r.success for r in res]))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=1000)
    ap.add_argument("--gamma", type=float, default=0.5)
    ap.add_argument("--tau", type=float, default=0.25)
    ap.add_argument("--T", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)

    sched = make_schedule("linear", args.T, 0.1 / args.T, 20.0 / args.T)
    centers = ring_centers(8, 2.0)
    den = AnalyticDenoiser(centers, args.gamma, sched)
    clf = QuadraticClassifier(centers, args.tau)

    grid = [("s", s, dict(s=s, a=0.0, N=1)) for s in (0.0, 0.1, 0.25, 0.5)]
    grid += [("N", n, dict(s=0.5, a=1.0, N=n)) for n in (1, 5, 10)]
    rows = []
    for knob, value, kw in grid:
        start = time.perf_counter()
        rate = asr(den, clf, sched, args.runs, args.seed, **kw)
        rows.append(dict(knob=knob, value=value, asr=rate))
        print(f"{knob}={value:<5} ASR {rate:.4f}  ({time.perf_counter() - start:.1f}s)")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["knob", "value", "asr"])
            wr.writeheader()
            wr.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
