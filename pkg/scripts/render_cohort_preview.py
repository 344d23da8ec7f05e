"""Render a synthetic cohort as one montage PNG per center.

Each montage puts the slides of a center side by side, image over mask, in
slide-index order with split and lesion-class labels baked into the filename.
Handy for eyeballing how far the center styles drift and whether the lesion
classes look the part before spending CPU on a full run.

Usage: python3 scripts/render_cohort_preview.py OUT_DIR [--seed N] [--centers 0,1]
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from uga import pngio, synthdata  # noqa: E402


def _montage(slides) -> np.ndarray:
    gap = 4
    size = slides[0].image.shape[0]
    width = len(slides) * size + (len(slides) - 1) * gap
    canvas = np.ones((2 * size + gap, width, 3), dtype=np.float64)
    for i, slide in enumerate(slides):
        x = i * (size + gap)
        canvas[:size, x:x + size] = slide.image
        canvas[size + gap:, x:x + size] = slide.mask[..., None].astype(np.float64)
    return canvas


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", help="directory for the montage PNGs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--centers", default=None,
                    help="comma-separated center ids (default: all)")
    args = ap.parse_args()

    spec = synthdata.CohortSpec(seed=args.seed)
    slides = synthdata.generate_cohort(spec)
    wanted = (set(range(spec.num_centers)) if args.centers is None
              else {int(c) for c in args.centers.split(",")})

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for center in sorted(wanted):
        mine = [s for s in slides if s.center == center]
        labels = "_".join(f"{s.split[:2]}-{s.lesion_class[:2]}" for s in mine)
        path = out / f"center{center}_seed{args.seed}_{labels}.png"
        pngio.save_rgb_png(path, _montage(mine))
        print(f"center {center}: {len(mine)} slides -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
