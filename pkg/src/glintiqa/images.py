"""Image I/O and layout conversions.

Arrays handled by the data pipeline are ``(H, W, 3)`` float32 in [0, 1]; the
network consumes ``(3, H, W)`` tensors.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array -> (3, H, W) float tensor."""
    arr = np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    return torch.from_numpy(arr)


def grayscale(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
