#!/usr/bin/env python3
"""Multi-seed benchmark study: train every variant on the default noisy
synthetic benchmark and tabulate mAP@tIoU per seed plus medians and gaps.

Writes one CSV row per (variant, seed) and prints a summary table.

    python3 scripts/run_benchmark.py --out runs/bench --seeds 5
"""

import argparse
import sys
import time
from pathlib import Path

from van.benchmark import BENCHMARK_TRAIN, median, run_seed
from van.evaluate import TIOU_THRESHOLDS


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="bench_out")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--variants", nargs="+",
                        default=["baseline", "van_i", "van_o", "van_p"])
    parser.add_argument("--k", type=int, default=3)
    parser.add_argument("--hidden", type=int, default=128)
    parser.add_argument("--iters", type=int, default=BENCHMARK_TRAIN["iters"])
    parser.add_argument("--cascade", type=int, default=2)
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    t0 = time.time()
    for seed in range(args.seeds):
        for row in run_seed(seed, args.variants, k=args.k, hidden=args.hidden,
                            cascade_steps=args.cascade, iters=args.iters):
            rows.append(row)
            shown = " ".join(f"{t}:{row.per_threshold[t]:.4f}" for t in TIOU_THRESHOLDS)
            print(f"seed {seed} {row.variant:9s} avg {row.avg:.4f}  {shown}", flush=True)

    with open(out / "benchmark.csv", "w") as fh:
        fh.write("variant,seed," + ",".join(f"map_{t}" for t in TIOU_THRESHOLDS) + ",avg\n")
        for row in rows:
            vals = ",".join(repr(row.per_threshold[t]) for t in TIOU_THRESHOLDS)
            fh.write(f"{row.variant},{row.seed},{vals},{row.avg!r}\n")

    print(f"\n{args.seeds} seeds in {time.time() - t0:.0f}s; medians of avg-mAP(0.3:0.7):")
    base_med = None
    for variant in args.variants:
        avgs = [r.avg for r in rows if r.variant == variant]
        med = median(avgs)
        if variant == "baseline":
            base_med = med
        gap = "" if base_med is None else f"  gap {100 * (med - base_med):+.2f}"
        print(f"  {variant:9s} {med:.4f}{gap}")

    if "baseline" in args.variants and "van_p" in args.variants:
        print("\nper-threshold median gap, van_p - baseline:")
        for t in TIOU_THRESHOLDS:
            vp = median([r.per_threshold[t] for r in rows if r.variant == "van_p"])
            bl = median([r.per_threshold[t] for r in rows if r.variant == "baseline"])
            print(f"  tIoU {t}: {100 * (vp - bl):+.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
