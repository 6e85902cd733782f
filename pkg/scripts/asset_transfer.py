"""Cold start versus a library carried over from a run on another stream seed."""
import argparse
import dataclasses
from pathlib import Path

from idea.harness import load_config, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "default.cfg")
    parser.add_argument("--out", default="runs/transfer")
    parser.add_argument("--source-seed", type=int, default=101)
    parser.add_argument("--target-seed", type=int, default=202)
    args = parser.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out)
    lib = out / "shared.idea-assets"
    out.mkdir(parents=True, exist_ok=True)
    run_experiment(dataclasses.replace(cfg, seed=args.source_seed), out / "source", assets_out=lib)
    target = dataclasses.replace(cfg, seed=args.target_seed)
    cold = run_experiment(target, out / "cold").summary
    warm = run_experiment(target, out / "warm", assets_in=lib).summary
    for name, s in (("cold start", cold), ("shared library", warm)):
        print(f"{name:15s} coverage by cycle {s['coverage_rate_by_cycle']}, optimizations {s['total_optimizations']}")


if __name__ == "__main__":
    main()
