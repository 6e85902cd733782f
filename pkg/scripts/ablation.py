"""Ablation on the layered stream: Fisher weighting and closed-form bridge against
decay weighting and nearest-asset retrieval."""
import argparse
import dataclasses
from pathlib import Path

import numpy as np

from idea.harness import load_config, run_experiment

ROOT = Path(__file__).resolve().parent.parent
VARIANTS = ("idea", "decay-weighting", "nearest-retrieval")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "ablation.cfg")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()

    cfg = load_config(args.config)
    print(f"{'variant':18s} {'reduction':>10s} {'coverage':>9s} {'optimizations':>14s}")
    for variant in VARIANTS:
        sums = [
            run_experiment(dataclasses.replace(cfg, variant=variant, seed=s), Path(args.out) / variant / f"seed{s}").summary
            for s in range(1, args.seeds + 1)
        ]
        red = np.array([s["mean_discrepancy_reduction"] for s in sums])
        cov = np.mean([s["coverage_rate"] for s in sums])
        opt = np.mean([s["total_optimizations"] for s in sums])
        print(f"{variant:18s} {red.mean():7.4f}±{red.std():.3f} {cov:9.3f} {opt:14.1f}")


if __name__ == "__main__":
    main()
