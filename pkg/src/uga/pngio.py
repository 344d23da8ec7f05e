"""8-bit PNG round-trip helpers shared across the pipeline.

Images travel in memory as float arrays in [0, 1]; on disk they are plain
8-bit PNGs (RGB for slides/patches, single-channel {0, 255} for masks).
Generated slides are quantized to 8-bit levels at creation time, so the
save/load cycle here is lossless for them.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .ioutil import atomic_write_bytes


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_rgb_png(path: str | Path, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as an 8-bit RGB PNG."""
    atomic_write_bytes(path, rgb_png_bytes(image))


def load_rgb_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit raster as float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Write a binary H x W mask as an 8-bit grayscale PNG with values {0, 255}."""
    if mask.ndim != 2:
        raise ValueError(f"expected HxW mask, got shape {mask.shape}")
    atomic_write_bytes(path, mask_png_bytes(mask))


def load_mask_png(path: str | Path, threshold: int = 128) -> np.ndarray:
    """Read a single-channel 8-bit mask and binarize at ``threshold``.

    Raises ValueError if the file is not single-channel.
    """
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "I;16", "P"):
            raise ValueError(f"mask {path} is not single-channel (mode={im.mode})")
        arr = np.asarray(im.convert("L"))
    return (arr >= threshold).astype(np.uint8)


def rgba_png_bytes(image_rgba: np.ndarray) -> bytes:
    """Encode an H x W x 4 RGBA image (float in [0, 1], or uint8) as PNG bytes."""
    if image_rgba.ndim != 3 or image_rgba.shape[2] != 4:
        raise ValueError(f"expected HxWx4 image, got shape {image_rgba.shape}")
    arr = image_rgba if image_rgba.dtype == np.uint8 else to_uint8(image_rgba)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def decode_rgba_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes into an H x W x 4 uint8 array."""
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGBA"))


def rgb_png_bytes(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def mask_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_png(data: bytes, threshold: int = 128,
                    strict_binary: bool = False) -> np.ndarray:
    """Decode PNG bytes into a binary mask; rejects multi-channel images.

    strict_binary additionally rejects any gray value outside {0, 255}.
    """
    with Image.open(io.BytesIO(data)) as im:
        if im.mode not in ("L", "1", "P"):
            raise ValueError(f"mask PNG is not single-channel (mode={im.mode})")
        arr = np.asarray(im.convert("L"))
    if strict_binary and not np.isin(arr, (0, 255)).all():
        raise ValueError("mask PNG carries gray values outside {0, 255}")
    return (arr >= threshold).astype(np.uint8)
