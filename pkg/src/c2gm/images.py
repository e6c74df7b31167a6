"""8-bit RGB PNG boundary: files hold uint8, arrays hold (3, H, W) floats in [-1, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import require


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] to (H, W, 3) uint8; values are clamped first."""
    require(image.ndim == 3 and image.shape[0] == 3, f"expected a (3, H, W) image, got {image.shape}")
    scaled = (np.clip(image, -1.0, 1.0) + 1.0) * 127.5
    return np.round(scaled).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    require(pixels.ndim == 3 and pixels.shape[2] == 3, f"expected (H, W, 3) pixels, got {pixels.shape}")
    return pixels.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def save_png(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def save_png_bytes(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def read_pixels(path) -> np.ndarray:
    """(H, W, 3) uint8; raises ``OSError`` / ``ValueError`` on undecodable files."""
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"))


def load_png(path) -> np.ndarray:
    return from_uint8(read_pixels(path))
