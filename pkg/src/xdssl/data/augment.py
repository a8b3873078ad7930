"""Two-view augmentation for contrastive pretraining.

Random resized crop, horizontal flip and colour jitter, sampled the way the
usual SimCLR pipelines do it but on single-channel frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from xdssl.data.preprocess import resize
from xdssl.errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class AugmentationConfig:
    output_size: int = 64
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    aspect_min: float = 3 / 4
    aspect_max: float = 4 / 3
    flip_probability: float = 0.5
    jitter_strength: float = 0.4
    jitter_probability: float = 0.8

    def __post_init__(self) -> None:
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            raise ConfigError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ConfigError("need 0 < aspect_min <= aspect_max")
        for name in ("flip_probability", "jitter_probability"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter_strength < 0:
            raise ConfigError("jitter_strength must be non-negative")
        if self.output_size < 1:
            raise ConfigError("output_size must be positive")


@dataclass(frozen=True)
class View:
    image: np.ndarray
    video_id: str | None = None
    frame_index: int | None = None


def sample_crop_box(h: int, w: int, config: AugmentationConfig, rng: np.random.Generator):
    area = h * w
    log_lo, log_hi = math.log(config.aspect_min), math.log(config.aspect_max)
    for _ in range(10):
        target_area = area * rng.uniform(config.crop_scale_min, config.crop_scale_max)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: central crop at the nearest admissible aspect ratio
    ratio = w / h
    if ratio < config.aspect_min:
        cw, ch = w, int(round(w / config.aspect_min))
    elif ratio > config.aspect_max:
        ch, cw = h, int(round(h * config.aspect_max))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def _jitter(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    lo, hi = max(0.0, 1 - strength), 1 + strength
    factors = rng.uniform(lo, hi, size=3)  # brightness, contrast, saturation
    out = image
    for op in rng.permutation(3):
        if op == 0:
            out = np.clip(out * factors[0], 0.0, 1.0)
        elif op == 1:
            mean = out.mean()
            out = np.clip((out - mean) * factors[1] + mean, 0.0, 1.0)
        # op == 2: saturation blends with the grayscale image, a no-op on one channel
    return out.astype(np.float32)


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    top, left, ch, cw = sample_crop_box(h, w, config, rng)
    out = resize(image[top : top + ch, left : left + cw], config.output_size)
    if rng.random() < config.flip_probability:
        out = out[:, ::-1]
    if rng.random() < config.jitter_probability:
        out = _jitter(out, config.jitter_strength, rng)
    return np.ascontiguousarray(out, dtype=np.float32)


def augment_pair(
    image: np.ndarray,
    config: AugmentationConfig,
    rng: np.random.Generator,
    record=None,
) -> tuple[View, View]:
    """Two independently augmented views of one frame.

    Both views carry the origin frame's ``video_id`` and ``frame_index`` when a
    record is given; the temporal negative mask needs them for all 2B samples.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (config.output_size, config.output_size):
        raise InvalidInputError(
            f"image must be {config.output_size}x{config.output_size}, got {image.shape}"
        )
    vid = record.video_id if record is not None else None
    fidx = record.frame_index if record is not None else None
    a = augment(image, config, rng)
    b = augment(image, config, rng)
    return View(a, vid, fidx), View(b, vid, fidx)
