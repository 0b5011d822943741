"""Canvas embedding, channel replication, normalization and augmentation.

Images are numpy arrays: gray images are H×W, RGB images H×W×3, and
network-ready tensors C×H×W. Intensities live in [0, 1] until normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class CanvasSpec:
    width: int
    height: int
    pad_value: float = 0.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"canvas must be at least 1x1, got {self.width}x{self.height}")
        if not 0.0 <= self.pad_value <= 1.0:
            raise ValueError(f"pad_value must be in [0, 1], got {self.pad_value}")

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class Placement:
    """Where the rescaled content sits inside a canvas."""

    content_width: int
    content_height: int
    left: int
    top: int

    @property
    def right(self) -> int:
        return self.left + self.content_width

    @property
    def bottom(self) -> int:
        return self.top + self.content_height


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def embed_geometry(width: int, height: int, spec: CanvasSpec) -> Placement:
    """Content size and offsets for fitting a ``width``×``height`` image into ``spec``.

    The scale is ``min(W/w, H/h)``. The shorter source side is scaled and rounded;
    the longer side is then derived from it so the content aspect ratio stays within
    half a pixel of the source's. Extra padding goes right/bottom.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image must be nonempty, got {width}x{height}")
    s = min(spec.width / width, spec.height / height)

    if width <= height:
        short, long_, short_cap, long_cap = width, height, spec.width, spec.height
    else:
        short, long_, short_cap, long_cap = height, width, spec.height, spec.width

    cs = min(short_cap, max(1, _round_half_up(s * short)))
    cl = max(1, _round_half_up(cs * long_ / short))
    if cl > long_cap:
        # only reachable when the short side was rounded up
        cs = max(1, cs - 1)
        cl = min(long_cap, max(1, _round_half_up(cs * long_ / short)))

    cw, ch = (cs, cl) if width <= height else (cl, cs)
    return Placement(cw, ch, (spec.width - cw) // 2, (spec.height - ch) // 2)


def resize_bilinear(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an H×W (or H×W×C) float image."""
    if image.shape[1] == width and image.shape[0] == height:
        return image.copy()
    if image.ndim == 3:
        return np.stack([resize_bilinear(image[..., c], width, height) for c in range(image.shape[2])], axis=2)
    out = Image.fromarray(np.ascontiguousarray(image, dtype=np.float32), mode="F").resize(
        (width, height), Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.float32)


def canvas_embed(image: np.ndarray, spec: CanvasSpec) -> np.ndarray:
    return canvas_embed_with_placement(image, spec)[0]


def canvas_embed_with_placement(image: np.ndarray, spec: CanvasSpec) -> tuple[np.ndarray, Placement]:
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"expected a nonempty H×W image, got shape {image.shape}")
    h, w = image.shape
    place = embed_geometry(w, h, spec)
    content = resize_bilinear(image, place.content_width, place.content_height)
    canvas = np.full((spec.height, spec.width), spec.pad_value, dtype=np.float32)
    canvas[place.top:place.bottom, place.left:place.right] = np.clip(content, 0.0, 1.0)
    return canvas, place


def replicate_channels(image: np.ndarray) -> np.ndarray:
    if image.ndim != 2:
        raise ValueError(f"expected a single-channel H×W image, got shape {image.shape}")
    return np.repeat(image[:, :, None], 3, axis=2)


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("normalization stats need exactly 3 channels")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std components must be positive, got {self.std}")


IMAGENET_STATS = NormalizationStats()


def normalize(image: np.ndarray, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    """H×W×3 image in [0, 1] → channel-first normalized C×H×W array."""
    mean = np.asarray(stats.mean, dtype=image.dtype)
    std = np.asarray(stats.std, dtype=image.dtype)
    return np.ascontiguousarray(((image - mean) / std).transpose(2, 0, 1))


def denormalize(tensor: np.ndarray, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=tensor.dtype)
    std = np.asarray(stats.std, dtype=tensor.dtype)
    return np.ascontiguousarray(tensor.transpose(1, 2, 0) * std + mean)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _check_range(name: str, rng: tuple[float, float], lo: float | None = None, hi: float | None = None):
    if len(rng) != 2 or rng[0] > rng[1]:
        raise ValueError(f"{name} must be a (lo, hi) pair with lo <= hi, got {rng}")
    if lo is not None and rng[0] < lo or hi is not None and rng[1] > hi:
        raise ValueError(f"{name} must lie within [{lo}, {hi}], got {rng}")


@dataclass(frozen=True)
class AugmentationConfig:
    # Affine transforms (rotation, shear) are deliberately not supported.
    enabled: bool = True
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    blur_probability: float = 0.25
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    noise_std_range: tuple[float, float] = (0.0, 0.05)
    brightness_delta: float = 0.1
    contrast_factor_range: tuple[float, float] = (0.8, 1.2)
    hflip_probability: float = 0.5

    def __post_init__(self):
        for name in ("blur_probability", "hflip_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        _check_range("crop_scale_range", self.crop_scale_range, 0.0, 1.0)
        if self.crop_scale_range[0] <= 0:
            raise ValueError("crop_scale_range lower bound must be positive")
        _check_range("blur_sigma_range", self.blur_sigma_range, 0.0)
        _check_range("noise_std_range", self.noise_std_range, 0.0)
        _check_range("contrast_factor_range", self.contrast_factor_range, 0.0)
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be nonnegative")


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of the augmentation pipeline."""

    crop: tuple[int, int, int, int]  # top, left, height, width
    blur_sigma: float | None
    noise_std: float
    noise_seed: int
    brightness: float
    contrast: float
    hflip: bool


def sample_augmentation(cfg: AugmentationConfig, rng: np.random.Generator, height: int, width: int) -> AugmentParams:
    # Every field is drawn on every call so the rng stream does not depend on outcomes.
    scale = rng.uniform(*cfg.crop_scale_range)
    ch = min(height, max(1, _round_half_up(height * math.sqrt(scale))))
    cw = min(width, max(1, _round_half_up(width * math.sqrt(scale))))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    blur = rng.random() < cfg.blur_probability
    sigma = rng.uniform(*cfg.blur_sigma_range)
    noise_std = rng.uniform(*cfg.noise_std_range)
    noise_seed = int(rng.integers(0, 2**63 - 1))
    brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    contrast = rng.uniform(*cfg.contrast_factor_range)
    hflip = rng.random() < cfg.hflip_probability
    return AugmentParams((top, left, ch, cw), float(sigma) if blur else None, float(noise_std), noise_seed,
                         float(brightness), float(contrast), bool(hflip))


def apply_augmentation(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply a drawn augmentation. Works on H×W or H×W×C images."""
    h, w = image.shape[:2]
    out = image.astype(np.float32, copy=True)

    top, left, ch, cw = params.crop
    if (ch, cw) != (h, w):
        out = resize_bilinear(out[top:top + ch, left:left + cw], w, h)

    if params.blur_sigma is not None:
        sigma = (params.blur_sigma, params.blur_sigma) + (0,) * (out.ndim - 2)
        out = gaussian_filter(out, sigma=sigma, mode="reflect")

    if params.noise_std > 0:
        noise = np.random.default_rng(params.noise_seed).normal(0.0, params.noise_std, size=(h, w))
        out = out + (noise[..., None] if out.ndim == 3 else noise).astype(np.float32)

    out = out + np.float32(params.brightness)
    if params.contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * np.float32(params.contrast) + mean

    if params.hflip:
        out = out[:, ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random crop, blur, noise, brightness, contrast, horizontal flip; clamped to [0, 1].

    Noise is shared across channels, so identical channels stay identical.
    """
    if not cfg.enabled:
        return image
    return apply_augmentation(image, sample_augmentation(cfg, rng, image.shape[0], image.shape[1]))
