"""Per-pixel ensemble disagreement, patch scoring, and heatmap rendering.

The disagreement score contrasts each fold's log-softmax map with the fold
mean: with M(c) the per-pixel mean log-probability and q = softmax(M) the
normalized geometric-mean distribution, the default score is the mean over
folds of KL(q || p_i), which collapses to -logsumexp_c M(c). It is zero
exactly at fold consensus. A "raw" variant skips the normalization of q and
the entropy subtraction, leaving the geometric-mean-weighted cross-entropy
-sum_c exp(M(c)) M(c); it is still nonnegative but equals the consensus
entropy rather than zero when all folds agree.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import pngio
from .ioutil import atomic_write_bytes

NORMALIZATION_TOL = 1e-6
AGREEMENT_TOL = 1e-9
WHITE_LUMINANCE = 0.9
BLACK_LUMINANCE = 0.1
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

UMAP_MAGIC = b"UGAU"

# Monotone dark-blue -> orange -> red ramp for heatmap rendering.
_RAMP_STOPS = np.array([0.0, 0.5, 1.0])
_RAMP_RGB = np.array([[0.0, 0.0, 96.0], [255.0, 160.0, 0.0], [255.0, 0.0, 0.0]])


@dataclass
class UncertaintyMap:
    """Per-pixel disagreement scores (nats) for one patch."""

    scores: np.ndarray
    slide_id: str = ""
    center: int = 0
    patch_origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be 2-D, got shape {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ValueError("non-finite uncertainty scores")
        if (self.scores < 0).any():
            raise ValueError("negative uncertainty scores")
        self.patch_origin = (int(self.patch_origin[0]), int(self.patch_origin[1]))


@dataclass
class PatchScore:
    """Patch-level aggregate of an uncertainty map."""

    slide_id: str
    center: int
    origin: tuple[int, int]
    total_uncertainty: float
    mean_uncertainty: float
    background_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.background_fraction <= 1.0:
            raise ValueError(f"background_fraction {self.background_fraction} outside [0, 1]")
        if self.total_uncertainty < 0 or self.mean_uncertainty < 0:
            raise ValueError("negative uncertainty aggregate")
        self.origin = (int(self.origin[0]), int(self.origin[1]))


def pixel_disagreement(log_prob_maps, variant: str = "kl", *, slide_id: str = "",
                       center: int = 0, patch_origin: tuple[int, int] = (0, 0)
                       ) -> UncertaintyMap:
    """Per-pixel ensemble disagreement from K per-fold log-probability maps.

    ``log_prob_maps`` stacks K maps of shape (H, W, C); each pixel of each
    map must be a normalized log-distribution. Summation over folds uses a
    canonical (sorted) order so fold permutations reproduce the map
    bit-for-bit.
    """
    maps = np.asarray(log_prob_maps, dtype=np.float64)
    if maps.ndim != 4:
        raise ValueError(f"expected (K, H, W, C) stack, got shape {maps.shape}")
    k = maps.shape[0]
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")
    if not np.isfinite(maps).all():
        raise ValueError("non-finite log-probabilities")
    prob_sums = np.exp(maps).sum(axis=-1)
    worst = float(np.abs(prob_sums - 1.0).max())
    if worst > NORMALIZATION_TOL:
        raise ValueError(f"log-prob maps not normalized (max |sum-1| = {worst:.3g})")

    mean_lp = np.sort(maps, axis=0).sum(axis=0) / k
    if variant == "kl":
        scores = -logsumexp(mean_lp, axis=-1)
        # Consensus pixels land at 0 up to rounding; clamp the stray ulps.
        scores = np.maximum(scores, 0.0)
    elif variant == "raw":
        scores = -(np.exp(mean_lp) * mean_lp).sum(axis=-1)
    else:
        raise ValueError(f"unknown variant {variant!r} (expected 'kl' or 'raw')")
    return UncertaintyMap(scores=scores.astype(np.float32), slide_id=slide_id,
                          center=center, patch_origin=patch_origin)


def background_fraction(patch: np.ndarray, *, white: float = WHITE_LUMINANCE,
                        black: float = BLACK_LUMINANCE) -> float:
    """Fraction of pixels whose luminance is >= white or <= black.

    Operates on the un-normalized patch (channels in [0, 1]); z-scored input
    is rejected so the filter cannot silently run on the wrong tensor.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected HxWx3 patch, got shape {patch.shape}")
    if patch.min() < 0.0 or patch.max() > 1.0:
        raise ValueError("patch channels outside [0, 1]; pass the un-normalized patch")
    luma = patch @ np.asarray(LUMA_WEIGHTS)
    return float(np.mean((luma >= white) | (luma <= black)))


def score_patch(umap: UncertaintyMap, patch: np.ndarray, *,
                white: float = WHITE_LUMINANCE, black: float = BLACK_LUMINANCE
                ) -> PatchScore:
    """Aggregate an uncertainty map into sum/mean plus the background filter."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape[:2] != umap.scores.shape:
        raise ValueError(
            f"patch shape {patch.shape[:2]} does not match map {umap.scores.shape}")
    total = float(umap.scores.sum(dtype=np.float64))
    return PatchScore(
        slide_id=umap.slide_id,
        center=umap.center,
        origin=umap.patch_origin,
        total_uncertainty=total,
        mean_uncertainty=total / umap.scores.size,
        background_fraction=background_fraction(patch, white=white, black=black),
    )


def render_heatmap(umap: UncertaintyMap) -> np.ndarray:
    """Max-normalized RGBA overlay (uint8); agreement maps render transparent.

    Maps whose peak is at or below AGREEMENT_TOL are treated as all-zero:
    normalizing them would amplify float noise from exact fold agreement
    into a full-scale overlay.
    """
    s = umap.scores.astype(np.float64)
    peak = float(s.max())
    norm = s / peak if peak > AGREEMENT_TOL else np.zeros_like(s)
    rgba = np.empty((*s.shape, 4), dtype=np.uint8)
    for c in range(3):
        rgba[..., c] = np.round(np.interp(norm, _RAMP_STOPS, _RAMP_RGB[:, c]))
    rgba[..., 3] = np.round(norm * 255.0)
    return rgba


def heatmap_png_bytes(umap: UncertaintyMap) -> bytes:
    return pngio.rgba_png_bytes(render_heatmap(umap))


def save_heatmap_png(umap: UncertaintyMap, path: str | Path) -> None:
    atomic_write_bytes(path, heatmap_png_bytes(umap))


def save_uncertainty_map(umap: UncertaintyMap, path: str | Path) -> None:
    """Binary map file: magic, u32 height, u32 width, row-major little-endian f32."""
    h, w = umap.scores.shape
    payload = UMAP_MAGIC + struct.pack("<II", h, w)
    payload += np.ascontiguousarray(umap.scores, dtype="<f4").tobytes()
    atomic_write_bytes(path, payload)


def load_uncertainty_map(path: str | Path, *, slide_id: str = "", center: int = 0,
                         patch_origin: tuple[int, int] = (0, 0)) -> UncertaintyMap:
    raw = Path(path).read_bytes()
    if raw[:4] != UMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    scores = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w)
    return UncertaintyMap(scores=scores.copy(), slide_id=slide_id, center=center,
                          patch_origin=patch_origin)
