"""Pool tiling, per-center uncertainty ranking, acquisition, and corrections.

Ranking walks a regular patch grid over every pool slide, scores each patch
with the ensemble-disagreement map, drops patches that are mostly background
(glass or void), and sorts the survivors per center. Acquisition either takes
the top of each center's list (uncertainty-guided) or draws uniformly from
the same filtered grid (the random baseline), under a shared rule that no two
selected patches on one slide may overlap. Oracle corrections crop the stored
ground truth; each corrected patch is expanded by flip/hue augmentation
before retraining.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .ioutil import atomic_write_text
from .segmenter import EnsembleModel, predict_log_probs_batch, zscore_normalize, _run_jobs
from .synthdata import CenterStyle, Slide, apply_center_style
from .uncertainty import PatchScore, background_fraction, pixel_disagreement, score_patch

log = logging.getLogger(__name__)

DEFAULT_BG_THRESHOLD = 0.7


def _entropy(seed) -> list[int]:
    """Normalize an int-or-sequence seed into an RNG entropy list."""
    return list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
SELECTED_BY = ("uga", "random", "none")
REVIEW_STATUSES = ("pending", "corrected", "skipped")
CORRECTION_SOURCES = ("oracle", "human")


@dataclass
class RankedPatch(PatchScore):
    rank_within_center: int = 0
    selected_by: str = "none"
    review_status: str = "pending"

    def __post_init__(self):
        super().__post_init__()
        if self.selected_by not in SELECTED_BY:
            raise ValueError(f"unknown selected_by {self.selected_by!r}")
        if self.review_status not in REVIEW_STATUSES:
            raise ValueError(f"unknown review_status {self.review_status!r}")

    @property
    def patch_id(self) -> str:
        """Stable identifier used by ranking files and the review service."""
        return f"{self.slide_id}_x{self.origin[0]}_y{self.origin[1]}"


@dataclass
class CorrectedPatch:
    patch: np.ndarray            # P x P x 3 float in [0, 1], un-normalized
    mask: np.ndarray             # P x P uint8 binary
    slide_id: str
    origin: tuple[int, int]
    correction_source: str

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.patch.ndim != 3 or self.patch.shape[2] != 3:
            raise ValueError(f"patch must be HxWx3, got {self.patch.shape}")
        if self.mask.shape != self.patch.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} != patch shape {self.patch.shape[:2]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("corrected mask must be binary")
        if self.correction_source not in CORRECTION_SOURCES:
            raise ValueError(f"unknown correction_source {self.correction_source!r}")
        self.origin = (int(self.origin[0]), int(self.origin[1]))


def build_patch_grid(slide, patch_size: int, stride: int | None = None
                     ) -> list[tuple[int, int]]:
    """(x, y) origins of a regular grid of fully-contained patches."""
    shape = slide.image.shape[:2] if hasattr(slide, "image") else tuple(slide)[:2]
    h, w = int(shape[0]), int(shape[1])
    if stride is None:
        stride = patch_size
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch size {patch_size} exceeds slide dims {(h, w)}")
    return [(x, y) for y in range(0, h - patch_size + 1, stride)
            for x in range(0, w - patch_size + 1, stride)]


def extract_patch(slide: Slide, origin: tuple[int, int], patch_size: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Crop (image patch, mask patch) at an (x, y) grid origin."""
    x, y = int(origin[0]), int(origin[1])
    if x < 0 or y < 0 or y + patch_size > slide.image.shape[0] \
            or x + patch_size > slide.image.shape[1]:
        raise ValueError(f"patch at {(x, y)} size {patch_size} leaves slide {slide.id}")
    return (slide.image[y:y + patch_size, x:x + patch_size],
            slide.mask[y:y + patch_size, x:x + patch_size])


def score_slide_patches(slide: Slide, ensemble: EnsembleModel, patch_size: int,
                 stride: int | None, variant: str) -> list[RankedPatch]:
    origins = build_patch_grid(slide, patch_size, stride)
    patches = np.stack([extract_patch(slide, o, patch_size)[0] for o in origins])
    norm = np.stack([zscore_normalize(p) for p in patches]).astype(np.float32)
    maps = np.stack([predict_log_probs_batch(fold, norm) for fold in ensemble.folds])
    out = []
    for n, origin in enumerate(origins):
        umap = pixel_disagreement(maps[:, n], variant=variant, slide_id=slide.id,
                                  center=slide.center, patch_origin=origin)
        ps = score_patch(umap, patches[n])
        out.append(RankedPatch(**dataclasses.asdict(ps)))
    return out


def rank_pool(pool_slides: list[Slide], ensemble: EnsembleModel, patch_size: int,
              stride: int | None = None, bg_threshold: float = DEFAULT_BG_THRESHOLD,
              *, key: str = "mean", variant: str = "kl", jobs: int = 1
              ) -> dict[int, list[RankedPatch]]:
    """Per-center descending-uncertainty ranking of all pool grid patches.

    Patches with background_fraction > bg_threshold are dropped before
    ranking. Ties break on (slide_id, origin y, origin x) so reruns are
    byte-stable. ``key`` selects the ranking key: mean or total uncertainty
    (identical order at fixed patch size).
    """
    if not pool_slides:
        raise ValueError("empty pool")
    if key not in ("mean", "total"):
        raise ValueError(f"unknown ranking key {key!r}")
    per_slide = _run_jobs(
        lambda i: score_slide_patches(pool_slides[i], ensemble, patch_size, stride, variant),
        len(pool_slides), jobs)
    keyval = (lambda p: p.mean_uncertainty) if key == "mean" \
        else (lambda p: p.total_uncertainty)
    by_center: dict[int, list[RankedPatch]] = {}
    for scored in per_slide:
        for p in scored:
            if p.background_fraction > bg_threshold:
                continue
            by_center.setdefault(p.center, []).append(p)
    for center, patches in sorted(by_center.items()):
        patches.sort(key=lambda p: (-keyval(p), p.slide_id, p.origin[1], p.origin[0]))
        for i, p in enumerate(patches):
            p.rank_within_center = i + 1
    return dict(sorted(by_center.items()))


def _overlaps(a: RankedPatch, b: RankedPatch, patch_size: int) -> bool:
    return (a.slide_id == b.slide_id
            and abs(a.origin[0] - b.origin[0]) < patch_size
            and abs(a.origin[1] - b.origin[1]) < patch_size)


def select_uga(ranked: dict[int, list[RankedPatch]], k_per_center: int,
               patch_size: int) -> list[RankedPatch]:
    """Top-k per center by rank, skipping same-slide overlaps with prior picks."""
    selected: list[RankedPatch] = []
    for center in sorted(ranked):
        taken: list[RankedPatch] = []
        for p in ranked[center]:
            if len(taken) == k_per_center:
                break
            if any(_overlaps(p, q, patch_size) for q in taken):
                continue
            taken.append(dataclasses.replace(p, selected_by="uga"))
        if len(taken) < k_per_center:
            log.warning("center %d: only %d of %d requested patches available",
                        center, len(taken), k_per_center)
        selected.extend(taken)
    return selected


def select_random(pool_slides: list[Slide], k_per_center: int,
                  bg_threshold: float = DEFAULT_BG_THRESHOLD, seed: int | list[int] = 0,
                  *, patch_size: int, stride: int | None = None
                  ) -> list[RankedPatch]:
    """Uniform seeded draws from each center's foreground grid patches.

    Shares the background filter and the no-overlap rule with select_uga so
    the two arms differ only in the acquisition signal. Uncertainty fields
    are zero: this baseline never consults a model.

    Draws walk a single seeded permutation per center, so for a fixed seed
    the k=5 selection is a prefix of the k=10 selection: callers comparing
    budgets get nested draws, same as the top-k arm.
    """
    if not pool_slides:
        raise ValueError("empty pool")
    by_center: dict[int, list[RankedPatch]] = {}
    for slide in pool_slides:
        for origin in build_patch_grid(slide, patch_size, stride):
            patch, _ = extract_patch(slide, origin, patch_size)
            bg = background_fraction(patch)
            if bg > bg_threshold:
                continue
            by_center.setdefault(slide.center, []).append(RankedPatch(
                slide_id=slide.id, center=slide.center, origin=origin,
                total_uncertainty=0.0, mean_uncertainty=0.0,
                background_fraction=bg, selected_by="random"))
    selected: list[RankedPatch] = []
    for center in sorted({s.center for s in pool_slides}):
        candidates = by_center.get(center, [])
        candidates.sort(key=lambda p: (p.slide_id, p.origin[1], p.origin[0]))
        rng = np.random.default_rng(_entropy(seed) + [center])
        taken: list[RankedPatch] = []
        for i in rng.permutation(len(candidates)):
            if len(taken) == k_per_center:
                break
            p = candidates[int(i)]
            if any(_overlaps(p, q, patch_size) for q in taken):
                continue
            p.rank_within_center = len(taken) + 1
            taken.append(p)
        if len(taken) < k_per_center:
            log.warning("center %d: only %d of %d random patches available",
                        center, len(taken), k_per_center)
        selected.extend(taken)
    return selected


def simulate_correction(patch_ref: RankedPatch, cohort: list[Slide],
                        patch_size: int) -> CorrectedPatch:
    """Oracle clinician: the corrected mask is the stored ground-truth crop."""
    by_id = {s.id: s for s in cohort}
    slide = by_id.get(patch_ref.slide_id)
    if slide is None:
        raise KeyError(f"unknown slide id {patch_ref.slide_id!r}")
    patch, mask = extract_patch(slide, patch_ref.origin, patch_size)
    return CorrectedPatch(patch=patch.copy(), mask=mask.copy(),
                          slide_id=slide.id, origin=patch_ref.origin,
                          correction_source="oracle")


def augment(cp: CorrectedPatch, n: int = 100, hue_range: float = 0.1,
            seed: int | list[int] = 0) -> list[CorrectedPatch]:
    """n independently sampled flip/hue variants of one corrected patch.

    Flips apply to patch and mask alike; the hue rotation (uniform in
    +-hue_range of the hue circle) recolors the patch only. A draw of
    (no flip, no flip, hue 0) reproduces the input bit-for-bit.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(_entropy(seed))
    out = []
    for _ in range(n):
        flip_h = bool(rng.integers(0, 2))
        flip_v = bool(rng.integers(0, 2))
        hue = float(rng.uniform(-hue_range, hue_range)) if hue_range > 0 else 0.0
        patch, mask = cp.patch, cp.mask
        if flip_h:
            patch, mask = patch[:, ::-1], mask[:, ::-1]
        if flip_v:
            patch, mask = patch[::-1], mask[::-1]
        patch = apply_center_style(patch, CenterStyle(hue_shift=hue))
        out.append(CorrectedPatch(patch=patch, mask=mask.copy(),
                                  slide_id=cp.slide_id, origin=cp.origin,
                                  correction_source=cp.correction_source))
    return out


# ---------------------------------------------------------------------------
# Ranking file: one JSON array per round, flattened across centers.


def save_rankings(ranked: dict[int, list[RankedPatch]], path: str | Path) -> None:
    rows = [{
        "slide_id": p.slide_id,
        "center": p.center,
        "x": p.origin[0],
        "y": p.origin[1],
        "total": p.total_uncertainty,
        "mean": p.mean_uncertainty,
        "background_fraction": p.background_fraction,
        "rank": p.rank_within_center,
        "selected_by": p.selected_by,
    } for center in sorted(ranked) for p in ranked[center]]
    atomic_write_text(path, json.dumps(rows, indent=1) + "\n")


def load_rankings(path: str | Path) -> dict[int, list[RankedPatch]]:
    rows = json.loads(Path(path).read_text())
    out: dict[int, list[RankedPatch]] = {}
    for r in rows:
        out.setdefault(int(r["center"]), []).append(RankedPatch(
            slide_id=r["slide_id"], center=int(r["center"]),
            origin=(int(r["x"]), int(r["y"])), total_uncertainty=float(r["total"]),
            mean_uncertainty=float(r["mean"]),
            background_fraction=float(r["background_fraction"]),
            rank_within_center=int(r["rank"]), selected_by=r["selected_by"]))
    return out


def mark_selected(ranked: dict[int, list[RankedPatch]],
                  selected: list[RankedPatch]) -> None:
    """Stamp selected_by onto the ranking entries matching each selection."""
    chosen = {(p.slide_id, p.origin): p.selected_by for p in selected}
    for patches in ranked.values():
        for p in patches:
            p.selected_by = chosen.get((p.slide_id, p.origin), p.selected_by)


# ---------------------------------------------------------------------------
# Corrected-patch persistence: paired PNGs plus a provenance sidecar.


def save_correction(cp: CorrectedPatch, out_dir: str | Path, stem: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pngio.save_rgb_png(out / f"{stem}.png", cp.patch)
    pngio.save_mask_png(out / f"{stem}_mask.png", cp.mask)
    atomic_write_text(out / f"{stem}.json", json.dumps({
        "slide_id": cp.slide_id,
        "origin": list(cp.origin),
        "correction_source": cp.correction_source,
    }, indent=1) + "\n")


def load_correction(out_dir: str | Path, stem: str) -> CorrectedPatch:
    out = Path(out_dir)
    meta = json.loads((out / f"{stem}.json").read_text())
    return CorrectedPatch(
        patch=pngio.load_rgb_png(out / f"{stem}.png"),
        mask=pngio.load_mask_png(out / f"{stem}_mask.png"),
        slide_id=meta["slide_id"], origin=tuple(meta["origin"]),
        correction_source=meta["correction_source"])
