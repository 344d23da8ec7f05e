"""Uncertainty-guided vs. random acquisition, paired over seeds.

Runs the full oracle-corrected loop on the default synthetic cohort with a
reduced training budget (32-px patches, 1000 steps) so five paired seeds fit
in minutes of CPU, then prints the arm summary plus per-seed win counts:
budget ordering (baseline < uga@5 <= uga@10), and uga vs. random at each k.
Arms chain cumulatively across k, so @10 extends @5's model by five more
corrected patches per center.

Usage: python3 scripts/run_acquisition_experiment.py OUT_DIR [--seeds 0,1,2,3,4]
A finished OUT_DIR is reloaded, so rerunning only prints the tables.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from uga import loop, segmenter, synthdata  # noqa: E402


def experiment_config(out_dir: str, seeds: tuple[int, ...]) -> loop.ExperimentConfig:
    return loop.ExperimentConfig(
        cohort=synthdata.CohortSpec(),
        train_config=segmenter.TrainConfig(patch_size=32, batch_size=2, steps=1000),
        strategy="both",
        k_schedule=(5, 10),
        seeds=seeds,
        folds=5,
        cumulative=True,
        retrain_steps=(1500, 750),
        output_dir=out_dir,
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", help="run directory (reused if it exists)")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    seeds = tuple(int(s) for s in args.seeds.split(","))
    config = experiment_config(args.out_dir, seeds)
    t0 = time.perf_counter()
    report = loop.run_experiment(config, jobs=args.jobs)
    print(f"{time.perf_counter() - t0:.0f}s wall for {len(seeds)} seeds\n")

    print(f"{'arm':<12}{'mean dice':>11}{'std':>9}")
    for row in report.summary_rows():
        print(f"{row['arm']:<12}{row['mean_dice']:>11.4f}{row['std_dice']:>9.4f}")

    per_seed: dict[int, dict[str, float]] = {}
    for rec in report.records:
        arm = "baseline" if rec.strategy == "baseline" else f"{rec.strategy}@{rec.k}"
        per_seed.setdefault(rec.seed, {})[arm] = rec.report.overall["mean"]

    print(f"\n{'seed':>5}{'baseline':>10}{'uga@5':>8}{'uga@10':>8}"
          f"{'rand@5':>8}{'rand@10':>9}")
    for seed, d in sorted(per_seed.items()):
        print(f"{seed:>5}{d['baseline']:>10.3f}{d['uga@5']:>8.3f}{d['uga@10']:>8.3f}"
              f"{d['random@5']:>8.3f}{d['random@10']:>9.3f}")

    n = len(per_seed)
    ordering = sum(d["baseline"] < d["uga@5"] <= d["uga@10"] for d in per_seed.values())
    wins5 = sum(d["uga@5"] >= d["random@5"] for d in per_seed.values())
    wins10 = sum(d["uga@10"] >= d["random@10"] for d in per_seed.values())
    print(f"\nbaseline < uga@5 <= uga@10 : {ordering}/{n} seeds")
    print(f"uga@5  >= random@5         : {wins5}/{n} seeds")
    print(f"uga@10 >= random@10        : {wins10}/{n} seeds")
    for err in report.errors:
        print(f"seed {err['seed']} failed: {err['error']}", file=sys.stderr)
    return 1 if report.errors else 0


if __name__ == "__main__":
    sys.exit(main())
