"""8-bit PNG reading and writing for (C, H, W) float images in [0, 1]."""
from __future__ import annotations

import io
import os

import numpy as np
from PIL import Image

from .model import atomic_write


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / 255.0


def quantize_image(x: np.ndarray) -> np.ndarray:
    """What an image looks like after a round trip through an 8-bit file."""
    return from_uint8(to_uint8(x))


def png_bytes(x: np.ndarray) -> bytes:
    a = to_uint8(x)
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, H, W) image, got shape {a.shape}")
    hwc = a[0] if a.shape[0] == 1 else np.transpose(a, (1, 2, 0))
    buf = io.BytesIO()
    Image.fromarray(hwc).save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: str | os.PathLike, x: np.ndarray) -> bytes:
    data = png_bytes(x)
    atomic_write(path, data)
    return data


def load_png(path: str | os.PathLike, channels: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        a = np.asarray(im)
    if a.ndim == 2:
        a = a[None]
    else:
        a = np.transpose(a, (2, 0, 1))
    return from_uint8(np.ascontiguousarray(a))
