"""Per-center disagreement readout for a finished run.

Recomputes the mean patch uncertainty of each center from the stored baseline
ranking and prints one row per center, lowest first. On a cohort whose styles
drift away from the training center, the training center should come out at
the bottom of the table: the ensemble argues most where the stain moved.

Usage: python3 scripts/uncertainty_by_center.py RUN_DIR [--seed N] [--key mean|total]
"""
from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from uga import loop, sampler  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", help="experiment output directory")
    ap.add_argument("--seed", type=int, default=None,
                    help="seed subdirectory to read (default: first configured seed)")
    ap.add_argument("--key", choices=("mean", "total"), default="mean",
                    help="per-patch statistic to average")
    args = ap.parse_args()

    config = loop.load_experiment_config(Path(args.run_dir) / "config.json")
    seed = config.seeds[0] if args.seed is None else args.seed
    path = Path(args.run_dir) / f"seed_{seed}" / "rankings" / "baseline.json"
    if not path.exists():
        print(f"error: missing ranking file {path}", file=sys.stderr)
        return 1

    ranked = sampler.load_rankings(path)
    rows = []
    for center, patches in sorted(ranked.items()):
        values = [getattr(p, args.key) for p in patches]
        rows.append((statistics.fmean(values), center, len(values)))
    rows.sort()

    train = config.cohort.train_center
    print(f"{'center':>7}{args.key:>12}{'patches':>9}")
    for value, center, n in rows:
        tag = "  <- training center" if center == train else ""
        print(f"{center:>7}{value:>12.6f}{n:>9}{tag}")
    ok = rows[0][1] == train
    print(f"training center ranks lowest: {'yes' if ok else 'no'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
