"""Confidence-aware fusion of two segmentation branches.

Each branch contributes its foreground probability weighted by a per-pixel
confidence, min-max normalised per image (or per batch), and the fused map is
the mean of the two weighted probabilities, thresholded at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from xdssl.errors import InvalidInputError

STRATEGIES = ("entropy", "margin", "average")
PROB_CLAMP = 1e-7
THRESHOLD = 0.5


def entropy_confidence(p, base: float = 2.0) -> np.ndarray:
    """``1 - H(p)`` for the two-class distribution ``(p, 1 - p)``.

    With ``base=2`` the result spans [0, 1]; with ``base=np.e`` it spans
    [1 - ln 2, 1].
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = 1.0 - p
    return 1.0 + (p * np.log(p) + q * np.log(q)) / np.log(base)


def margin_confidence(p) -> np.ndarray:
    """Gap between the top two class probabilities, ``|2p - 1|`` for binary maps."""
    p = np.asarray(p, dtype=np.float64)
    return np.abs(2.0 * p - 1.0)


def minmax_normalize(c, scope: str = "image") -> np.ndarray:
    """Rescale confidences to [0, 1].

    ``scope="image"`` normalises each trailing 2-D map separately;
    ``scope="batch"`` uses one min/max over the whole array. A constant map
    becomes all ones.
    """
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("confidences must be finite")
    if scope == "batch" or c.ndim < 2:
        axes = None
    elif scope == "image":
        axes = (-2, -1)
    else:
        raise InvalidInputError(f"unknown normalisation scope {scope!r}")
    lo = c.min(axis=axes, keepdims=True)
    hi = c.max(axis=axes, keepdims=True)
    span = hi - lo
    flat = span == 0
    out = (c - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 1.0, out)


@dataclass
class FusionInputs:
    p_g: np.ndarray
    p_c: np.ndarray
    strategy: str = "entropy"
    c_g: np.ndarray | None = None
    c_c: np.ndarray | None = None
    scope: str = "image"
    entropy_base: float = 2.0

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"unknown fusion strategy {self.strategy!r}")
        self.p_g = np.asarray(self.p_g, dtype=np.float64)
        self.p_c = np.asarray(self.p_c, dtype=np.float64)
        shapes = {self.p_g.shape, self.p_c.shape}
        for c in (self.c_g, self.c_c):
            if c is not None:
                shapes.add(np.shape(c))
        if len(shapes) != 1:
            raise InvalidInputError(f"fusion maps have mismatched shapes {sorted(shapes)}")
        for p in (self.p_g, self.p_c):
            if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
                raise InvalidInputError("branch probabilities must lie in [0, 1]")

    def raw_confidences(self) -> tuple[np.ndarray, np.ndarray]:
        if self.c_g is not None and self.c_c is not None:
            return np.asarray(self.c_g, dtype=np.float64), np.asarray(self.c_c, dtype=np.float64)
        if self.strategy == "entropy":
            return entropy_confidence(self.p_g, self.entropy_base), entropy_confidence(self.p_c, self.entropy_base)
        if self.strategy == "margin":
            return margin_confidence(self.p_g), margin_confidence(self.p_c)
        ones = np.ones_like(self.p_g)
        return ones, ones


@dataclass
class FusedPrediction:
    probabilities: np.ndarray
    binary_mask: np.ndarray
    normalized_confidences: tuple[np.ndarray, np.ndarray]


def fuse(inputs: FusionInputs, threshold: float = THRESHOLD) -> FusedPrediction:
    if inputs.strategy == "average":
        ones = np.ones_like(inputs.p_g)
        cg, cc = ones, ones
    else:
        raw_g, raw_c = inputs.raw_confidences()
        cg = minmax_normalize(raw_g, inputs.scope)
        cc = minmax_normalize(raw_c, inputs.scope)
    y = 0.5 * (inputs.p_g * cg + inputs.p_c * cc)
    return FusedPrediction(y, y >= threshold, (cg, cc))
