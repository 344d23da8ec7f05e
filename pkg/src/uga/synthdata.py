"""Synthetic multi-center slide cohort with controllable color styles.

Produces small "slides" mimicking stained tissue scans from several
laboratories: one center keeps its native colors and serves as the training
source, the remaining centers render the same kind of tissue under shifted
hue / saturation / brightness, which is what breaks a model trained on a
single center. Lesions are compact blobs whose footprint area determines a
size class (negative / itc / micro / macro).

Also ingests user-supplied image/mask pairs so real data can replace the
synthetic cohort.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from . import pngio
from .ioutil import atomic_write_text

log = logging.getLogger(__name__)

LESION_CLASSES = ("negative", "itc", "micro", "macro")
SPLITS = ("train", "pool", "test")

# Default lesion area bands (pixels, at 256x256 slides). Structural analogue
# of the clinical size convention; overridable via CohortSpec.
DEFAULT_ITC_MAX_AREA = 50
DEFAULT_MICRO_MAX_AREA = 1000


def _default_mix() -> dict[str, float]:
    return {"negative": 0.25, "itc": 0.25, "micro": 0.25, "macro": 0.25}


@dataclass(frozen=True)
class CohortSpec:
    """Parameters of a synthetic cohort; generation is pure in these fields."""

    num_centers: int = 5
    slides_per_center: int = 24
    slide_size: int = 256
    lesion_class_mix: dict[str, float] = field(default_factory=_default_mix)
    seed: int = 0
    train_center: int = 0
    itc_max_area: int = DEFAULT_ITC_MAX_AREA
    micro_max_area: int = DEFAULT_MICRO_MAX_AREA
    # 1.0 renders lesions at full color separation from tissue; lower values
    # blend them toward the tissue palette and make the task harder.
    lesion_contrast: float = 1.0

    def validate(self) -> None:
        if self.num_centers < 2:
            raise ValueError("num_centers must be >= 2")
        if self.slides_per_center < 1:
            raise ValueError("slides_per_center must be >= 1")
        if self.slide_size < 4:
            raise ValueError("slide_size must be >= 4")
        if not (0 <= self.train_center < self.num_centers):
            raise ValueError("train_center out of range")
        mix = self.lesion_class_mix
        if set(mix) - set(LESION_CLASSES):
            raise ValueError(f"lesion_class_mix has unknown classes: {sorted(set(mix) - set(LESION_CLASSES))}")
        if any(v < 0 for v in mix.values()):
            raise ValueError("lesion_class_mix entries must be >= 0")
        if abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ValueError("lesion_class_mix must sum to 1")
        if not (0.0 < self.itc_max_area < self.micro_max_area):
            raise ValueError("area bands must satisfy 0 < itc_max_area < micro_max_area")
        if not (0.0 <= self.lesion_contrast <= 1.0):
            raise ValueError("lesion_contrast must lie in [0, 1]")


@dataclass(frozen=True)
class CenterStyle:
    """Pixelwise color transform emulating one lab's staining appearance."""

    hue_shift: float = 0.0          # fraction of the hue circle, in [-0.5, 0.5]
    saturation_scale: float = 1.0
    brightness_offset: float = 0.0  # added to the value channel, in [-0.2, 0.2]
    texture_seed: int = 0

    @property
    def is_identity(self) -> bool:
        return self.hue_shift == 0.0 and self.saturation_scale == 1.0 and self.brightness_offset == 0.0


@dataclass
class Slide:
    id: str
    center: int
    image: np.ndarray          # H x W x 3 float32 in [0, 1], 8-bit quantized
    mask: np.ndarray           # H x W uint8, 1 = lesion
    lesion_class: str
    split: str

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"slide {self.id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}")
        if self.lesion_class not in LESION_CLASSES:
            raise ValueError(f"unknown lesion_class {self.lesion_class!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


def apply_center_style(image: np.ndarray, style: CenterStyle) -> np.ndarray:
    """Rotate hue, scale saturation and offset brightness, pixelwise.

    Channels are assumed to be in [0, 1]; the output is clamped back into
    range. Gray pixels (zero saturation) are unchanged by the hue rotation.
    """
    if style.is_identity:
        return image.copy()
    hsv = rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + style.hue_shift, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * style.saturation_scale, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + style.brightness_offset, 0.0, 1.0)
    return hsv_to_rgb(hsv).astype(image.dtype)


def lesion_class_of(mask: np.ndarray, itc_max_area: int = DEFAULT_ITC_MAX_AREA,
                    micro_max_area: int = DEFAULT_MICRO_MAX_AREA) -> str:
    """Classify a binary mask by the area of its largest 4-connected component."""
    fg = mask > 0
    if not fg.any():
        return "negative"
    labels, n = ndimage.label(fg)  # default structure = 4-connectivity
    largest = np.bincount(labels.ravel())[1:].max()
    if largest <= itc_max_area:
        return "itc"
    if largest <= micro_max_area:
        return "micro"
    return "macro"


def center_styles(spec: CohortSpec) -> list[CenterStyle]:
    """Deterministic per-center styles; the training center is the identity."""
    styles = []
    for c in range(spec.num_centers):
        rng = np.random.default_rng([spec.seed, c, 0xC5])
        texture_seed = int(rng.integers(0, 2**32))
        if c == spec.train_center:
            styles.append(CenterStyle(texture_seed=texture_seed))
            continue
        # One-sided moderate hue shifts move the lesion palette toward the
        # trained tissue hue, so shifted slides stay ambiguous to the
        # ensemble rather than being confidently misread. Larger or
        # two-sided rotations push slides far enough off the training
        # manifold that the folds fail in agreement, which erases the
        # per-center disagreement signal.
        hue = float(rng.uniform(0.05, 0.15))
        sat = float(rng.uniform(0.90, 1.15))
        bri = float(rng.uniform(-0.02, 0.02))
        styles.append(CenterStyle(hue_shift=hue, saturation_scale=sat,
                                  brightness_offset=bri, texture_seed=texture_seed))
    return styles


def _apportion(mix: dict[str, float], n: int) -> list[str]:
    """Largest-remainder apportionment of the class mix over n items."""
    classes = [c for c in LESION_CLASSES if mix.get(c, 0.0) > 0]
    quotas = np.array([mix[c] * n for c in classes])
    counts = np.floor(quotas).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(quotas - counts), kind="stable")
    for i in range(remainder):
        counts[order[i % len(classes)]] += 1
    out: list[str] = []
    for c, k in zip(classes, counts):
        out.extend([c] * k)
    return out


def _split_sizes(spec: CohortSpec, center: int) -> tuple[int, int, int]:
    """(train, pool, test) slide counts for one center."""
    n = spec.slides_per_center
    n_test = max(1, n // 4) if n >= 2 else 0
    if center == spec.train_center:
        n_pool = max(1, n // 4) if n - n_test >= 2 else 0
        n_train = n - n_pool - n_test
    else:
        n_train = 0
        n_pool = n - n_test
    return n_train, n_pool, n_test


def _assign_classes(spec: CohortSpec) -> dict[tuple[int, int], str]:
    """Map (center, slide index) -> lesion class.

    The mix is apportioned independently within every (center, split) block,
    so split composition follows the mix as closely as integer counts allow
    and is identical across centers. Per-center test Dice and pool
    uncertainty then stay comparable instead of inheriting class-draw noise.
    """
    assignment: dict[tuple[int, int], str] = {}
    for c in range(spec.num_centers):
        offset = 0
        for count in _split_sizes(spec, c):
            for j, cls in enumerate(_apportion(spec.lesion_class_mix, count)):
                assignment[(c, offset + j)] = cls
            offset += count
    return assignment


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Zero-mean unit-ish amplitude smooth noise field."""
    noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=sigma)
    peak = np.abs(noise).max()
    return noise / peak if peak > 0 else noise


def _tissue_support(rng: np.random.Generator, size: int) -> np.ndarray:
    """Connected tissue blob with a wavy boundary, glass elsewhere."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size * rng.uniform(0.42, 0.58)
    cy = size * rng.uniform(0.42, 0.58)
    theta = rng.uniform(0, np.pi)
    a = size * rng.uniform(0.30, 0.42)
    b = size * rng.uniform(0.30, 0.42)
    xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    implicit = 1.0 - (xr / a) ** 2 - (yr / b) ** 2
    implicit += 0.3 * _smooth_noise(rng, size, sigma=size / 10)
    return implicit > 0


def _render_lesion_mask(rng: np.random.Generator, tissue: np.ndarray, lesion_class: str,
                        spec: CohortSpec) -> np.ndarray:
    """Blob mask whose largest 4-connected component lands in the class band."""
    size = tissue.shape[0]
    if lesion_class == "negative":
        return np.zeros_like(tissue, dtype=np.uint8)
    lo, hi = {
        "itc": (8, spec.itc_max_area),
        "micro": (int(spec.itc_max_area * 1.5), int(spec.micro_max_area * 0.8)),
        "macro": (int(spec.micro_max_area * 1.3), int(spec.micro_max_area * 3.2)),
    }[lesion_class]
    yy, xx = np.mgrid[0:size, 0:size]
    interior = ndimage.binary_erosion(tissue, iterations=3)
    coords = np.argwhere(interior)
    if len(coords) == 0:
        coords = np.argwhere(tissue)
    for attempt in range(60):
        area = rng.uniform(lo, hi)
        ratio = rng.uniform(0.5, 1.0)
        b_ax = max(1.0, np.sqrt(area / (np.pi * ratio)))
        a_ax = max(1.0, area / (np.pi * b_ax))
        cy, cx = coords[rng.integers(len(coords))]
        theta = rng.uniform(0, np.pi)
        xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        blob = ((xr / a_ax) ** 2 + (yr / b_ax) ** 2) <= 1.0
        mask = (blob & tissue).astype(np.uint8)
        if lesion_class_of(mask, spec.itc_max_area, spec.micro_max_area) == lesion_class:
            return mask
    raise RuntimeError(f"could not place a {lesion_class} lesion after 60 attempts")


# Tissue / lesion palettes in HSV. The lesion is roughly iso-luminant with the
# tissue so the separating cue is color direction, which center styles rotate.
_TISSUE_HSV = (0.93, 0.30, 0.82)
_LESION_HSV = (0.70, 0.30, 0.93)
_GLASS_LEVEL = 0.96


def _render_slide_image(rng: np.random.Generator, tissue: np.ndarray, mask: np.ndarray,
                        spec: CohortSpec) -> np.ndarray:
    size = tissue.shape[0]
    h = np.full((size, size), _TISSUE_HSV[0])
    s = np.full((size, size), _TISSUE_HSV[1])
    v = np.full((size, size), _TISSUE_HSV[2])
    h += 0.015 * _smooth_noise(rng, size, sigma=3)
    s += 0.05 * _smooth_noise(rng, size, sigma=3)
    v += 0.05 * _smooth_noise(rng, size, sigma=2)

    c = spec.lesion_contrast
    les = mask > 0
    h[les] = h[les] * (1 - c) + (_LESION_HSV[0] + 0.02 * _smooth_noise(rng, size, sigma=2)[les]) * c
    s[les] = s[les] * (1 - c) + (_LESION_HSV[1] + 0.05 * _smooth_noise(rng, size, sigma=2)[les]) * c
    v[les] = v[les] * (1 - c) + (_LESION_HSV[2] + 0.04 * _smooth_noise(rng, size, sigma=2)[les]) * c

    hsv = np.stack([np.mod(h, 1.0), np.clip(s, 0, 1), np.clip(v, 0, 1)], axis=-1)
    img = hsv_to_rgb(hsv)

    glass = ~tissue
    glass_tone = _GLASS_LEVEL + 0.015 * _smooth_noise(rng, size, sigma=1.5)
    img[glass] = glass_tone[glass, None]

    img += rng.normal(scale=0.008, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _generate_slide(spec: CohortSpec, style: CenterStyle, center: int, idx: int,
                    lesion_class: str, split: str) -> Slide:
    rng = np.random.default_rng([spec.seed, style.texture_seed, center, idx])
    tissue = _tissue_support(rng, spec.slide_size)
    mask = _render_lesion_mask(rng, tissue, lesion_class, spec)
    img = _render_slide_image(rng, tissue, mask, spec)
    img = apply_center_style(img, style)
    img = np.round(img * 255.0) / 255.0  # 8-bit levels; PNG round-trips are lossless
    return Slide(id=f"c{center}_s{idx:03d}", center=center, image=img.astype(np.float32),
                 mask=mask, lesion_class=lesion_class, split=split)


def generate_cohort(spec: CohortSpec) -> list[Slide]:
    """Deterministically generate all slides of the cohort described by ``spec``.

    Training slides come only from ``spec.train_center``; every center
    contributes pool and test slides, and the test slides are disjoint from
    the pool.
    """
    spec.validate()
    styles = center_styles(spec)
    classes = _assign_classes(spec)
    slides: list[Slide] = []
    for center in range(spec.num_centers):
        n_train, n_pool, n_test = _split_sizes(spec, center)
        for idx in range(spec.slides_per_center):
            if idx < n_train:
                split = "train"
            elif idx < n_train + n_pool:
                split = "pool"
            else:
                split = "test"
            slides.append(_generate_slide(spec, styles[center], center, idx,
                                          classes[(center, idx)], split))
    return slides


def ingest_pair(image_file: str | Path, mask_file: str | Path, center: int,
                split: str = "pool",
                itc_max_area: int = DEFAULT_ITC_MAX_AREA,
                micro_max_area: int = DEFAULT_MICRO_MAX_AREA) -> Slide:
    """Build a Slide from a user-supplied 8-bit image and single-channel mask.

    The mask is binarized at 128; the lesion class is re-derived from the
    binarized mask.
    """
    image = pngio.load_rgb_png(image_file)
    mask = pngio.load_mask_png(mask_file, threshold=128)
    if image.shape[:2] != mask.shape:
        raise ValueError(
            f"dimension mismatch: image {image.shape[:2]} vs mask {mask.shape}")
    cls = lesion_class_of(mask, itc_max_area, micro_max_area)
    return Slide(id=Path(image_file).stem, center=center, image=image,
                 mask=mask, lesion_class=cls, split=split)


# ---------------------------------------------------------------------------
# Cohort persistence: PNG pairs plus a JSON manifest.

COHORT_MANIFEST = "manifest.json"


def save_cohort(slides: list[Slide], out_dir: str | Path, spec: CohortSpec | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in slides:
        image_rel = f"images/{s.id}.png"
        mask_rel = f"masks/{s.id}.png"
        pngio.save_rgb_png(out / image_rel, s.image)
        pngio.save_mask_png(out / mask_rel, s.mask)
        entries.append({"id": s.id, "center": s.center, "split": s.split,
                        "lesion_class": s.lesion_class, "image": image_rel, "mask": mask_rel})
    manifest = {"version": 1, "slides": entries}
    if spec is not None:
        manifest["spec"] = asdict(spec)
    path = out / COHORT_MANIFEST
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_cohort(cohort_dir: str | Path) -> list[Slide]:
    root = Path(cohort_dir)
    manifest_path = root / COHORT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no cohort manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    slides = []
    for e in manifest["slides"]:
        image = pngio.load_rgb_png(root / e["image"])
        mask = pngio.load_mask_png(root / e["mask"])
        slides.append(Slide(id=e["id"], center=e["center"], image=image, mask=mask,
                            lesion_class=e["lesion_class"], split=e["split"]))
    return slides
