"""Procedural images for desk-scale experiments and test fixtures.

Each image mixes smooth colour gradients, band-limited noise, oriented
gratings and hard-edged shapes, so it has both flat regions and detail.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def make_image(seed: int, size: int | tuple[int, int] = 64) -> np.ndarray:
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy /= h
    xx /= w
    img = np.empty((h, w, 3), np.float32)
    base = rng.uniform(0.2, 0.8, 3)
    grad = rng.uniform(-0.3, 0.3, (3, 2))
    for c in range(3):
        img[..., c] = base[c] + grad[c, 0] * (yy - 0.5) + grad[c, 1] * (xx - 0.5)
    # band-limited noise
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(1.0, 3.0))
    noise /= noise.std() + 1e-8
    img += 0.08 * noise[..., None] * rng.uniform(0.5, 1.0, 3)
    # oriented gratings
    for _ in range(2):
        theta, freq = rng.uniform(0, np.pi), rng.uniform(4, 12)
        phase = rng.uniform(0, 2 * np.pi)
        g = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += 0.08 * g[..., None] * rng.uniform(-1, 1, 3)
    # hard-edged shapes
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.25)
        colour = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = 0.5 * img[mask] + 0.5 * colour
    return np.clip(img, 0.0, 1.0)


def make_images(n: int, size=64, seed: int = 0) -> list[np.ndarray]:
    return [make_image(seed * 100_003 + i, size) for i in range(n)]


BLUR_LADDER = (0.3, 0.8, 1.3, 1.9, 2.6)


def blur_ladder(n_contents: int = 20, size: int = 40, seed: int = 1, sigmas=BLUR_LADDER):
    """Small synthetic IQA set: every content blurred at len(sigmas) levels,
    label = len(sigmas) + 1 - level so quality falls monotonically with blur."""
    from .datasets import IQADataset, Sample

    samples = []
    for c, img in enumerate(make_images(n_contents, size, seed)):
        for level, sigma in enumerate(sigmas, start=1):
            blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
            samples.append(
                Sample(f"c{c:02d}_l{level}", float(len(sigmas) + 1 - level), f"c{c:02d}",
                       type="gaussian_blur", level=level,
                       image=np.clip(blurred, 0.0, 1.0).astype(np.float32))
            )
    return IQADataset("blur_ladder", samples)
