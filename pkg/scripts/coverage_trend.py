"""Coverage growth and discrepancy reduction over the stream, per variant and seed.

Writes one run directory per (variant, seed) under --out and an aggregate report
with per-variant step series under --out/report.
"""
import argparse
import dataclasses
from pathlib import Path

from idea.harness import find_records, load_config, report, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "default.cfg")
    parser.add_argument("--out", default="runs/coverage_trend")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--variants", nargs="+", default=["idea", "always-optimize", "no-adapt"])
    args = parser.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out)
    for variant in args.variants:
        for seed in range(1, args.seeds + 1):
            rec = run_experiment(dataclasses.replace(cfg, variant=variant, seed=seed), out / variant / f"seed{seed}")
            s = rec.summary
            print(f"{variant:16s} seed {seed}: coverage by cycle {s['coverage_rate_by_cycle']}, "
                  f"optimizations {s['total_optimizations']}, reduction {s['mean_discrepancy_reduction']:.3f}")
    print(report(find_records(out), out / "report"))


if __name__ == "__main__":
    main()
