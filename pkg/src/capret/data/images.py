"""Image loading and preprocessing to the fixed 224x224 float tensor."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

TARGET_SIZE = 224


class ImageDecodeError(ValueError):
    """Raised when a file cannot be decoded as an RGB raster."""


def preprocess_array(pixels: np.ndarray) -> np.ndarray:
    """Resize an HxWx3 uint8 array to 224x224x3 float32 in [0, 1].

    Bilinear resampling; a 224x224 input passes through bit-identically
    after scaling.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageDecodeError(f"expected HxWx3 RGB array, got shape {pixels.shape}")
    if pixels.shape[:2] != (TARGET_SIZE, TARGET_SIZE):
        img = Image.fromarray(pixels, mode="RGB")
        img = img.resize((TARGET_SIZE, TARGET_SIZE), Image.Resampling.BILINEAR)
        pixels = np.asarray(img)
    out = pixels.astype(np.float32) / 255.0
    return np.clip(out, 0.0, 1.0)


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode an in-memory encoded image (PNG/JPEG/...) and preprocess it."""
    import io

    try:
        with Image.open(io.BytesIO(data)) as img:
            pixels = np.asarray(img.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image bytes: {exc}") from exc
    return preprocess_array(pixels)


def load_and_preprocess_image(path: str | Path) -> np.ndarray:
    """Decode an image file and preprocess it; non-RGB modes are converted."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            try:
                img = img.convert("RGB")
            except (OSError, ValueError) as exc:
                raise ImageDecodeError(f"{path}: no RGB conversion path: {exc}") from exc
            pixels = np.asarray(img)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return preprocess_array(pixels)
