"""Dice scoring, tiled whole-slide inference, and stratified reports.

Whole-slide prediction tiles the slide, averages the per-fold softmax
probabilities (arithmetic mean; the uncertainty formula's geometric mean is
deliberately not reused here), and thresholds at 0.5 with ties resolved to
foreground. Dice between two empty masks is defined as 1.0 so the negative
stratum rewards a correct all-clear instead of being undefined.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ioutil import atomic_write_text
from .sampler import score_slide_patches
from .segmenter import EnsembleModel, _run_jobs, predict_log_probs_batch, zscore_normalize
from .synthdata import LESION_CLASSES, Slide

DEFAULT_BG_THRESHOLD = 0.7


@dataclass
class DiceScore:
    value: float
    slide_id: str
    center: int
    lesion_class: str

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"dice {self.value} outside [0, 1]")


@dataclass
class StratifiedReport:
    overall: dict                      # {"mean", "std", "n"}
    per_center: dict[int, dict]
    per_class: dict[str, dict]
    per_slide: list[DiceScore]
    uncertainty_by_center: dict[int, float]

    def __post_init__(self):
        values = [d.value for d in self.per_slide]
        if values and abs(self.overall["mean"] - float(np.mean(values))) > 1e-9:
            raise ValueError("overall mean inconsistent with per-slide values")


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1.0."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = int(np.count_nonzero(pred))
    b = int(np.count_nonzero(gt))
    if a + b == 0:
        return 1.0
    inter = int(np.count_nonzero(np.logical_and(pred, gt)))
    return 2.0 * inter / (a + b)


def _tile_origins(h: int, w: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Grid origins covering the full slide; a final end-aligned row/column
    is added when the stride does not land exactly on the far edge."""
    ys = list(range(0, h - patch_size + 1, stride))
    xs = list(range(0, w - patch_size + 1, stride))
    if ys[-1] != h - patch_size:
        ys.append(h - patch_size)
    if xs[-1] != w - patch_size:
        xs.append(w - patch_size)
    return [(x, y) for y in ys for x in xs]


def predict_slide(ensemble: EnsembleModel, slide: Slide, patch_size: int,
                  stride: int | None = None) -> np.ndarray:
    """Tiled ensemble segmentation of one slide; returns a uint8 binary mask."""
    h, w = slide.image.shape[:2]
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch size {patch_size} exceeds slide dims {(h, w)}")
    stride = stride or patch_size
    origins = _tile_origins(h, w, patch_size, stride)
    batch = np.stack([
        zscore_normalize(slide.image[y:y + patch_size, x:x + patch_size])
        for x, y in origins]).astype(np.float32)
    prob = np.zeros((len(origins), patch_size, patch_size))
    for fold in ensemble.folds:
        prob += np.exp(predict_log_probs_batch(fold, batch))[..., 1]
    prob /= len(ensemble.folds)
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    for n, (x, y) in enumerate(origins):
        acc[y:y + patch_size, x:x + patch_size] += prob[n]
        cnt[y:y + patch_size, x:x + patch_size] += 1.0
    return (acc / cnt >= 0.5).astype(np.uint8)


def _stratum(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def evaluate(ensemble: EnsembleModel, test_slides: list[Slide], patch_size: int,
             stride: int | None = None, *, bg_threshold: float = DEFAULT_BG_THRESHOLD,
             variant: str = "kl", jobs: int = 1) -> StratifiedReport:
    """Per-slide Dice plus center/class strata and per-center mean uncertainty.

    uncertainty_by_center averages patch mean-uncertainty over each center's
    test grid patches, using the same background filter as the ranking so
    glass tiles do not dilute the comparison between centers.
    """
    if not test_slides:
        raise ValueError("empty test set")
    scores = _run_jobs(
        lambda i: DiceScore(
            value=dice(predict_slide(ensemble, test_slides[i], patch_size, stride),
                       test_slides[i].mask),
            slide_id=test_slides[i].id, center=test_slides[i].center,
            lesion_class=test_slides[i].lesion_class),
        len(test_slides), jobs)

    unc: dict[int, list[float]] = {}
    for slide in test_slides:
        for p in score_slide_patches(slide, ensemble, patch_size, None, variant):
            if p.background_fraction > bg_threshold:
                continue
            unc.setdefault(p.center, []).append(p.mean_uncertainty)
    # A center whose every patch is glass still needs an entry: fall back to
    # the unfiltered mean rather than reporting nothing.
    for slide in test_slides:
        if slide.center not in unc:
            unc.setdefault(slide.center, []).extend(
                p.mean_uncertainty for p in
                score_slide_patches(slide, ensemble, patch_size, None, variant))

    per_center: dict[int, dict] = {}
    per_class: dict[str, dict] = {}
    for center in sorted({d.center for d in scores}):
        per_center[center] = _stratum([d.value for d in scores if d.center == center])
    for cls in LESION_CLASSES:
        vals = [d.value for d in scores if d.lesion_class == cls]
        if vals:
            per_class[cls] = _stratum(vals)
    return StratifiedReport(
        overall=_stratum([d.value for d in scores]),
        per_center=per_center,
        per_class=per_class,
        per_slide=scores,
        uncertainty_by_center={c: float(np.mean(v)) for c, v in sorted(unc.items())},
    )


# ---------------------------------------------------------------------------
# Persistence: full JSON report, per-slide CSV, and a plot-data CSV feeding
# the per-center / per-class charts.


def save_report(report: StratifiedReport, path: str | Path) -> None:
    payload = {
        "overall": report.overall,
        "per_center": {str(c): s for c, s in report.per_center.items()},
        "per_class": report.per_class,
        "per_slide": [asdict(d) for d in report.per_slide],
        "uncertainty_by_center": {str(c): v for c, v in
                                  report.uncertainty_by_center.items()},
    }
    atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_report(path: str | Path) -> StratifiedReport:
    raw = json.loads(Path(path).read_text())
    return StratifiedReport(
        overall=raw["overall"],
        per_center={int(c): s for c, s in raw["per_center"].items()},
        per_class=raw["per_class"],
        per_slide=[DiceScore(value=d["value"], slide_id=d["slide_id"],
                             center=d["center"], lesion_class=d["lesion_class"])
                   for d in raw["per_slide"]],
        uncertainty_by_center={int(c): v for c, v in
                               raw["uncertainty_by_center"].items()},
    )


def save_report_csv(report: StratifiedReport, path: str | Path) -> None:
    with io.StringIO(newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "center", "lesion_class", "dice"])
        for d in report.per_slide:
            writer.writerow([d.slide_id, d.center, d.lesion_class, repr(d.value)])
        atomic_write_text(path, fh.getvalue())


def save_plot_data_csv(report: StratifiedReport, path: str | Path) -> None:
    with io.StringIO(newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "key", "mean", "std", "n"])
        for c, s in report.per_center.items():
            writer.writerow(["dice_by_center", c, repr(s["mean"]), repr(s["std"]), s["n"]])
        for cls, s in report.per_class.items():
            writer.writerow(["dice_by_class", cls, repr(s["mean"]), repr(s["std"]), s["n"]])
        for c, v in report.uncertainty_by_center.items():
            writer.writerow(["uncertainty_by_center", c, repr(v), "", ""])
        atomic_write_text(path, fh.getvalue())
