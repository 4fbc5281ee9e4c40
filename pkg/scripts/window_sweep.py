#!/usr/bin/env python3
"""Sweep the window count of the energy front end.

Reports top-1 accuracy and the worst decision margin (gap between the
best and second-best subject, relative) for each W over the synthetic
corpus. Useful when picking a front end for a different corpus.
"""
import argparse
import sys

sys.path.insert(0, "src")

from eduction import pipeline as P


def sweep(windows: int, subjects: int, n: int):
    train, test = P.default_corpus(subjects=subjects, n=n)
    ts, _ = P.run_pipeline_local(train, P.TRAIN_MODE, windows=windows)
    _, results = P.run_pipeline_local(
        [(None, s) for _, s in test], P.CLASSIFY_MODE, ts=ts, windows=windows
    )
    hits, total = P.top1_accuracy(results, [sid for sid, _ in test])
    worst = None
    for rs in results:
        if len(rs) >= 2:
            (_, d0), (_, d1) = rs[0], rs[1]
            margin = (d1 - d0) / d1 if d1 > 0 else 0.0
            worst = margin if worst is None else min(worst, margin)
    return hits, total, worst


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=4)
    ap.add_argument("--length", type=int, default=512)
    ap.add_argument(
        "--windows", type=int, nargs="+", default=[2, 4, 8, 16, 32, 64]
    )
    args = ap.parse_args()

    print(f"{'W':>4}  {'accuracy':>9}  {'worst margin':>12}")
    for w in args.windows:
        hits, total, worst = sweep(w, args.subjects, args.length)
        print(f"{w:>4}  {hits:>4}/{total:<4}  {worst:>12.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
