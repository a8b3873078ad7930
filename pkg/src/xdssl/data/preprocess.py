from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from xdssl.errors import InvalidInputError


def pad_to_square(image: np.ndarray) -> np.ndarray:
    """Zero-pad the shorter axis symmetrically; an odd remainder goes to the bottom/right."""
    h, w = image.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.zeros((side, side), dtype=image.dtype)
    out[top : top + h, left : left + w] = image
    return out


def resize(image: np.ndarray, size: int, mode: str = "bilinear") -> np.ndarray:
    if image.shape == (size, size):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    if mode == "nearest":
        out = F.interpolate(t, size=(size, size), mode="nearest")
    else:
        out = F.interpolate(t, size=(size, size), mode=mode, align_corners=False)
    return out[0, 0].numpy()


def pad_and_resize(image: np.ndarray, target: int, mode: str = "bilinear") -> np.ndarray:
    """Pad a grayscale frame to a centred square, then resize to ``target`` x ``target``."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise InvalidInputError(f"expected a non-empty 2-D image, got shape {image.shape}")
    if target < 1:
        raise InvalidInputError(f"target size must be positive, got {target}")
    return resize(pad_to_square(image.astype(np.float32, copy=False)), target, mode)


def prepare_mask(mask: np.ndarray, target: int) -> np.ndarray:
    """Binary mask through the same geometry as its image, re-binarised at 0.5."""
    resized = pad_and_resize((np.asarray(mask) > 0.5).astype(np.float32), target)
    return (resized >= 0.5).astype(np.float32)
