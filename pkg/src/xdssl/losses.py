"""Training objectives.

Everything here is a pure function of its tensor arguments and is
differentiable through autograd, so the same code serves float32 training
and float64 gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from xdssl.errors import InvalidInputError, UndefinedLossError

DICE_SMOOTH = 1.0
BCE_CLAMP = 1e-7


# --------------------------------------------------------------------------
# masked image modelling


def sample_patch_mask(grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(grid_h, grid_w)`` grid with exactly ``floor(ratio * n)`` True cells."""
    n = grid_h * grid_w
    if n < 1:
        raise InvalidInputError("patch grid must contain at least one patch")
    if not 0 <= ratio <= 1:
        raise InvalidInputError(f"mask ratio must lie in [0, 1], got {ratio}")
    k = math.floor(ratio * n + 1e-9)
    flat = np.zeros(n, dtype=bool)
    flat[rng.permutation(n)[:k]] = True
    return flat.reshape(grid_h, grid_w)


@dataclass
class MaskedBatch:
    images: torch.Tensor  # (B, C, H, W) in [0, 1]
    patch_mask: torch.Tensor  # (B, H/ps, W/ps) bool
    patch_size: int

    def __post_init__(self) -> None:
        b, _, h, w = self.images.shape
        ps = self.patch_size
        if h % ps or w % ps:
            raise InvalidInputError(f"image size {h}x{w} not divisible by patch size {ps}")
        if tuple(self.patch_mask.shape) != (b, h // ps, w // ps):
            raise InvalidInputError(
                f"patch mask shape {tuple(self.patch_mask.shape)} does not match grid {(b, h // ps, w // ps)}"
            )
        self.patch_mask = self.patch_mask.to(torch.bool)

    @property
    def pixel_mask(self) -> torch.Tensor:
        """(B, 1, H, W) bool, True on pixels of masked patches."""
        ps = self.patch_size
        m = self.patch_mask.repeat_interleave(ps, dim=1).repeat_interleave(ps, dim=2)
        return m[:, None]

    @property
    def masked_images(self) -> torch.Tensor:
        return self.images.masked_fill(self.pixel_mask, 0.0)


def make_masked_batch(
    images: torch.Tensor, ratio: float, patch_size: int, rng: np.random.Generator
) -> MaskedBatch:
    b, _, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise InvalidInputError(f"image size {h}x{w} not divisible by patch size {patch_size}")
    grids = np.stack([sample_patch_mask(h // patch_size, w // patch_size, ratio, rng) for _ in range(b)])
    return MaskedBatch(images, torch.from_numpy(grids), patch_size)


def masked_mae_loss(batch: MaskedBatch, reconstruction: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked-patch pixels only.

    Per image: mean of ``|x - x_hat|`` over the pixels (all channels) of its
    masked patches. The batch loss is the mean over images.
    """
    images = batch.images
    if reconstruction.shape != images.shape:
        raise InvalidInputError(
            f"reconstruction shape {tuple(reconstruction.shape)} != image shape {tuple(images.shape)}"
        )
    counts = batch.patch_mask.flatten(1).sum(dim=1)
    if bool((counts == 0).any()):
        raise UndefinedLossError("masked MAE is undefined for an image with no masked patches")
    weight = batch.pixel_mask.expand_as(images).to(images.dtype)
    err = (reconstruction - images).abs() * weight
    per_image = err.flatten(1).sum(dim=1) / weight.flatten(1).sum(dim=1)
    return per_image.mean()


# --------------------------------------------------------------------------
# segmentation


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    _check_pair(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def bce_loss(pred: torch.Tensor, target: torch.Tensor, clamp: float = BCE_CLAMP) -> torch.Tensor:
    _check_pair(pred, target)
    p = pred.clamp(clamp, 1.0 - clamp)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dice_bce_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    return dice_loss(pred, target, smooth) + bce_loss(pred, target)


# --------------------------------------------------------------------------
# contrastive


def build_temporal_mask(
    video_ids: Sequence[str], frame_indices: Sequence[int], batch_size: int, min_frame_gap: int
) -> np.ndarray:
    """2B x 2B boolean mask of entries excluded from the contrastive softmax.

    Samples are ordered ``[z_1..z_B, z'_1..z'_B]`` and each augmented view
    shares its original's metadata. An entry is masked on the diagonal, or when
    both samples come from the same video less than ``min_frame_gap`` frames
    apart, unless the pair is a positive pair ``(i, i+B)``.
    """
    if len(video_ids) != batch_size or len(frame_indices) != batch_size:
        raise InvalidInputError(
            f"metadata lengths ({len(video_ids)}, {len(frame_indices)}) do not match batch size {batch_size}"
        )
    if min_frame_gap < 0:
        raise InvalidInputError("min_frame_gap must be non-negative")
    _, vid = np.unique(np.asarray(list(video_ids) * 2, dtype=object).astype(str), return_inverse=True)
    frames = np.asarray(list(frame_indices) * 2, dtype=np.int64)
    same_video = vid[:, None] == vid[None, :]
    close = np.abs(frames[:, None] - frames[None, :]) < min_frame_gap
    mask = same_video & close
    idx = np.arange(batch_size)
    mask[idx, idx + batch_size] = False
    mask[idx + batch_size, idx] = False
    np.fill_diagonal(mask, True)
    return mask


def positive_indices(batch_size: int) -> np.ndarray:
    idx = np.arange(2 * batch_size)
    return (idx + batch_size) % (2 * batch_size)


@dataclass
class MaskedSimilarity:
    s: torch.Tensor
    mask: torch.Tensor
    s_tilde: torch.Tensor
    positive_index: torch.Tensor


def masked_similarity(
    z: torch.Tensor,
    z_prime: torch.Tensor,
    video_ids: Sequence[str],
    frame_indices: Sequence[int],
    temperature: float,
    min_frame_gap: int,
) -> MaskedSimilarity:
    b = z.shape[0]
    zz = torch.cat([z, z_prime], dim=0)
    s = zz @ zz.T / temperature
    mask = torch.from_numpy(build_temporal_mask(video_ids, frame_indices, b, min_frame_gap))
    sentinel = torch.finfo(s.dtype).min
    s_tilde = s.masked_fill(mask, sentinel)
    pos = torch.from_numpy(positive_indices(b))
    return MaskedSimilarity(s, mask, s_tilde, pos)


def _check_embeddings(z: torch.Tensor, z_prime: torch.Tensor, tol: float) -> None:
    if z.ndim != 2 or z.shape != z_prime.shape:
        raise InvalidInputError(f"embedding shapes {tuple(z.shape)} and {tuple(z_prime.shape)} must match (B, d)")
    if z.shape[0] == 0:
        raise InvalidInputError("contrastive loss needs at least one sample")
    norms = torch.linalg.vector_norm(torch.cat([z, z_prime]).detach(), dim=1)
    if bool(((norms - 1.0).abs() > tol).any()):
        raise InvalidInputError("embeddings must be L2-normalised")


def mt_nxent_loss(
    z: torch.Tensor,
    z_prime: torch.Tensor,
    video_ids: Sequence[str],
    frame_indices: Sequence[int],
    temperature: float = 0.5,
    min_frame_gap: int = 15,
    norm_tol: float = 1e-6,
) -> torch.Tensor:
    """NT-Xent with temporally adjacent same-video frames removed from the negatives.

    With ``min_frame_gap=0`` only the diagonal is masked and this is plain
    NT-Xent.
    """
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    _check_embeddings(z, z_prime, norm_tol)
    sim = masked_similarity(z, z_prime, video_ids, frame_indices, temperature, min_frame_gap)
    return F.cross_entropy(sim.s_tilde, sim.positive_index.to(sim.s_tilde.device))
