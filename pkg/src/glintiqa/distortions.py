"""Synthetic distortion bank: parameterised degradation families at five
intensity levels. Per-level parameters live in ``data/distortions.toml``."""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
import PIL
from PIL import Image
from scipy import ndimage

from .errors import CapabilityError, ConfigError
from .images import grayscale, to_uint8

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

_MOD = "distortion_bank"
LEVELS = (1, 2, 3, 4, 5)


@lru_cache(maxsize=1)
def load_table() -> dict:
    text = resources.files("glintiqa").joinpath("data/distortions.toml").read_text()
    return tomllib.loads(text)


def table_version() -> str:
    return load_table()["version"]


def all_families() -> list[str]:
    fams = load_table()["families"]
    return sorted(fams, key=lambda f: fams[f]["index"])


def available_families() -> list[str]:
    fams = load_table()["families"]
    return [f for f in all_families() if "values" in fams[f] and f in _APPLY]


def family_info(name: str) -> dict:
    fams = load_table()["families"]
    if name not in fams or "values" not in fams[name] or name not in _APPLY:
        raise CapabilityError(
            f"distortion family {name!r} is not implemented; available: "
            f"{', '.join(available_families())}",
            module=_MOD,
        )
    return fams[name]


@dataclass(frozen=True)
class DistortionSpec:
    family: str
    level: int
    params: dict = field(default_factory=dict, compare=False, hash=False)
    seed: int = 0

    @classmethod
    def make(cls, family: str, level: int, seed: int = 0) -> "DistortionSpec":
        info = family_info(family)
        if level not in LEVELS:
            raise ConfigError(f"level must be in 1..5, got {level}", module=_MOD)
        return cls(family, level, {info["param"]: info["values"][level - 1]}, seed)


@dataclass
class DegradedImage:
    data: np.ndarray
    source_id: str
    spec: DistortionSpec
    codec: dict | None = None
    compressed: bytes | None = None


def enumerate_specs(families, levels=LEVELS, seed: int = 0) -> list[DistortionSpec]:
    families = list(families)
    if not families:
        raise ConfigError("no distortion families selected", module=_MOD)
    levels = list(levels)
    if not levels:
        raise ConfigError("no distortion levels selected", module=_MOD)
    return [DistortionSpec.make(f, l, seed) for f, l in itertools.product(families, levels)]


def apply_distortion(x: np.ndarray, spec: DistortionSpec, source_id: str = "") -> DegradedImage:
    """Degrade an (H, W, 3) float image in [0, 1]. Deterministic in
    (x, spec); stochastic families draw from ``spec.seed`` only, so the same
    noise field is scaled across levels."""
    info = family_info(spec.family)
    value = info["values"][spec.level - 1]
    x = np.asarray(x, dtype=np.float32)
    out = _APPLY[spec.family](x, value, np.random.default_rng(spec.seed))
    codec = compressed = None
    if isinstance(out, tuple):
        out, compressed = out
        codec = {"codec": info["codec"], info["param"]: value, "library": f"Pillow {PIL.__version__}"}
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return DegradedImage(out, source_id, spec, codec, compressed)


# --------------------------------------------------------------------------- severity proxies


def laplacian_variance(img: np.ndarray) -> float:
    return float(ndimage.laplace(grayscale(np.asarray(img, dtype=np.float64))).var())


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))


# --------------------------------------------------------------------------- families


def _convolve(x, kernel):
    return np.stack([ndimage.convolve(x[..., c], kernel, mode="reflect") for c in range(3)], axis=-1)


def _gaussian_blur(x, sigma, rng):
    return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")


def _lens_blur(x, radius, rng):
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = (xx**2 + yy**2 <= r * r).astype(np.float32)
    return _convolve(x, disk / disk.sum())


def _motion_blur(x, length, rng):
    length = int(length)
    angle = rng.uniform(0.0, np.pi)
    kernel = np.zeros((length, length), dtype=np.float32)
    c = (length - 1) / 2
    for t in np.linspace(-c, c, 4 * length):
        kernel[int(round(c + t * np.sin(angle))), int(round(c + t * np.cos(angle)))] = 1.0
    return _convolve(x, kernel / kernel.sum())


def _color_saturation(x, factor, rng):
    gray = grayscale(x)[..., None]
    return gray + (x - gray) * factor


def _codec_roundtrip(x, fmt, **save_kw):
    buf = io.BytesIO()
    Image.fromarray(to_uint8(x), mode="RGB").save(buf, format=fmt, **save_kw)
    data = buf.getvalue()
    with Image.open(io.BytesIO(data)) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return out, data


def _jpeg(x, quality, rng):
    return _codec_roundtrip(x, "JPEG", quality=int(quality), subsampling=2, optimize=False)


def _jpeg2000(x, ratio, rng):
    return _codec_roundtrip(
        x, "JPEG2000", quality_mode="rates", quality_layers=[float(ratio)], irreversible=True
    )


def _white_noise(x, variance, rng):
    return x + np.sqrt(variance) * rng.standard_normal(x.shape, dtype=np.float32)


_RGB2YCC = np.array(
    [[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]], np.float32
)
_YCC2RGB = np.linalg.inv(_RGB2YCC).astype(np.float32)


def _white_noise_color(x, variance, rng):
    ycc = x @ _RGB2YCC.T
    noise = np.sqrt(variance) * rng.standard_normal(x.shape[:2] + (2,), dtype=np.float32)
    ycc[..., 1:] += noise
    return ycc @ _YCC2RGB.T


def _impulse_noise(x, prob, rng):
    u = rng.random(x.shape[:2])
    salt = rng.random(x.shape[:2]) < 0.5
    out = x.copy()
    hit = u < prob
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _multiplicative_noise(x, variance, rng):
    return x * (1.0 + np.sqrt(variance) * rng.standard_normal(x.shape, dtype=np.float32))


def _brighten(x, strength, rng):
    return 1.0 - (1.0 - x) ** (1.0 + strength)


def _darken(x, strength, rng):
    return x ** (1.0 + strength)


def _mean_shift(x, offset, rng):
    return x + offset


def _pixelate(x, block, rng):
    # border blocks average only real pixels, so block grids of 2, 4, 8, ...
    # nest and the error grows with block size
    b = int(block)
    h, w = x.shape[:2]
    rows, cols = np.arange(0, h, b), np.arange(0, w, b)
    sums = np.add.reduceat(np.add.reduceat(x.astype(np.float64), rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    means = (sums / counts[..., None]).astype(x.dtype)
    return np.repeat(np.repeat(means, b, axis=0), b, axis=1)[:h, :w]


def _quantization(x, levels, rng):
    n = int(levels) - 1
    return np.round(x * n) / n


def _high_sharpen(x, amount, rng):
    blurred = ndimage.gaussian_filter(x, sigma=(1.5, 1.5, 0), mode="reflect")
    return x + amount * (x - blurred)


def _contrast_change(x, factor, rng):
    mean = grayscale(x).mean()
    return mean + (x - mean) * factor


_APPLY = {
    "gaussian_blur": _gaussian_blur,
    "lens_blur": _lens_blur,
    "motion_blur": _motion_blur,
    "color_saturation_1": _color_saturation,
    "jpeg2000": _jpeg2000,
    "jpeg": _jpeg,
    "white_noise": _white_noise,
    "white_noise_color_component": _white_noise_color,
    "impulse_noise": _impulse_noise,
    "multiplicative_noise": _multiplicative_noise,
    "brighten": _brighten,
    "darken": _darken,
    "mean_shift": _mean_shift,
    "pixelate": _pixelate,
    "quantization": _quantization,
    "high_sharpen": _high_sharpen,
    "contrast_change": _contrast_change,
}
