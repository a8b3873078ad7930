"""Training runners: MIM pretraining, contrastive pretraining, supervised fine-tuning.

All randomness comes from ``RunConfig.seed``: model initialisation through a
seeded torch generator, and batch order, patch masks and augmentations
through one numpy generator. Every data file a run opens is recorded in its
run manifest.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from xdssl.checkpoint import Checkpoint, checkpoint_from_model, load_checkpoint, transfer_weights, write_checkpoint
from xdssl.data.audit import AccessAudit, audited, read_png
from xdssl.data.augment import AugmentationConfig, augment_pair
from xdssl.data.preprocess import pad_and_resize, prepare_mask
from xdssl.data.records import FrameRecord, Manifest
from xdssl.errors import ConfigError
from xdssl.losses import dice_bce_loss, make_masked_batch, masked_mae_loss, mt_nxent_loss
from xdssl.model import Backbone, BackboneConfig, build_model, group_digests

log = logging.getLogger(__name__)

STAGES = ("pretrain_mim", "pretrain_contrastive", "finetune", "baseline")
OPTIMIZERS = ("sgd", "adam", "adamw")
TRANSFERABLE = frozenset({"embedding", "encoder", "projection"})

# optimiser family and weight decay follow the paper; learning rates, epochs and
# batch sizes are rescaled for a few hundred 64 px phantom frames on one CPU core
DESK_PRESETS = {
    "pretrain_mim": dict(optimizer="adamw", learning_rate=5e-4, weight_decay=0.05, epochs=40, batch_size=16),
    "pretrain_contrastive": dict(optimizer="adam", learning_rate=3e-4, weight_decay=0.05, epochs=40, batch_size=32),
    "finetune": dict(optimizer="sgd", learning_rate=1e-2, weight_decay=0.05, epochs=30, batch_size=16),
    "baseline": dict(optimizer="sgd", learning_rate=1e-2, weight_decay=0.05, epochs=30, batch_size=16),
}
PAPER_PRESETS = {
    "pretrain_mim": dict(optimizer="adamw", learning_rate=5e-4, weight_decay=0.05, epochs=1200, batch_size=128),
    "pretrain_contrastive": dict(optimizer="adam", learning_rate=1e-5, weight_decay=0.05, epochs=400, batch_size=512),
    "finetune": dict(optimizer="sgd", learning_rate=2e-4, weight_decay=0.05, epochs=200, batch_size=512),
    "baseline": dict(optimizer="sgd", learning_rate=2e-4, weight_decay=0.05, epochs=200, batch_size=512),
}


@dataclass
class RunConfig:
    stage: str
    manifest_path: str
    output_dir: str
    domain: str = "target"
    train_splits: tuple[str, ...] = ("train",)
    val_splits: tuple[str, ...] = ()
    optimizer: str = "adamw"
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    momentum: float = 0.9
    epochs: int = 1
    batch_size: int = 16
    mask_ratio: float = 0.6
    mask_patch_size: int = 8
    temperature: float = 0.5
    min_frame_gap: int = 15
    dice_smooth: float = 1.0
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augmentation: AugmentationConfig | None = None

    def __post_init__(self) -> None:
        self.train_splits = tuple(self.train_splits)
        self.val_splits = tuple(self.val_splits)
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.domain not in ("source", "target"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.stage == "pretrain_mim":
            if not 0 < self.mask_ratio <= 1:
                raise ConfigError("mask_ratio must lie in (0, 1]")
            if self.backbone.image_size % self.mask_patch_size:
                raise ConfigError("image_size must be divisible by mask_patch_size")
        if self.stage == "pretrain_contrastive":
            if self.temperature <= 0:
                raise ConfigError("temperature must be positive")
            if self.min_frame_gap < 0:
                raise ConfigError("min_frame_gap must be >= 0")

    @classmethod
    def preset(cls, stage: str, scale: str = "desk", **overrides) -> RunConfig:
        table = DESK_PRESETS if scale == "desk" else PAPER_PRESETS
        if stage not in table:
            raise ConfigError(f"unknown stage {stage!r}")
        return cls(stage=stage, **{**table[stage], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["train_splits"] = list(self.train_splits)
        d["val_splits"] = list(self.val_splits)
        return d


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None

    def add(self, epoch: int, train_loss: float, val_loss: float | None, wall_time: float) -> bool:
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError("epochs must be logged in increasing order")
        self.records.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "wall_time": wall_time})
        score = val_loss if val_loss is not None else train_loss
        if self.best_val_loss is None or score < self.best_val_loss:
            self.best_epoch, self.best_val_loss = epoch, score
            return True
        return False

    @property
    def train_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def val_losses(self) -> list[float | None]:
        return [r["val_loss"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass
class RunResult:
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint
    log: TrainLog
    audit: AccessAudit
    transfer_report: dict | None = None

    @property
    def output_dir(self) -> Path:
        return Path(self.checkpoint.metadata["output_dir"])


# --------------------------------------------------------------------------
# data


def load_images(records: list[FrameRecord], size: int) -> torch.Tensor:
    arrs = [pad_and_resize(read_png(r.image_path), size) for r in records]
    return torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))


def load_masks(records: list[FrameRecord], size: int) -> torch.Tensor:
    missing = [r.image_id for r in records if r.mask_path is None]
    if missing:
        raise ConfigError(f"{len(missing)} frames lack masks, e.g. {missing[:3]}")
    arrs = [prepare_mask(read_png(r.mask_path), size) for r in records]
    return torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))


def _select(manifest: Manifest, cfg: RunConfig, splits, labeled: bool | None) -> list[FrameRecord]:
    recs = manifest.select(domain=cfg.domain, split=splits, labeled=labeled)
    return sorted(recs, key=lambda r: (r.video_id, r.frame_index))


def _optimizer(cfg: RunConfig, params) -> torch.optim.Optimizer:
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _metadata(cfg: RunConfig, stage: str, epoch: int, extra: dict | None = None) -> dict:
    meta = {
        "stage": stage,
        "rng_seed": cfg.seed,
        "epoch": epoch,
        "config_digest": cfg.backbone.digest(),
        "backbone": cfg.backbone.to_dict(),
        "output_dir": str(cfg.output_dir),
    }
    meta.update(extra or {})
    return meta


def _finish(
    cfg: RunConfig,
    model: Backbone,
    best_state: dict,
    log_: TrainLog,
    audit: AccessAudit,
    stage_tag: str,
    extra: dict | None = None,
) -> RunResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    final = checkpoint_from_model(model, _metadata(cfg, stage_tag, log_.records[-1]["epoch"], extra))
    best_model = copy.deepcopy(model)
    best_model.load_state_dict(best_state)
    best = checkpoint_from_model(best_model, _metadata(cfg, stage_tag, log_.best_epoch, extra))
    write_checkpoint(final, out / "final.ckpt")
    write_checkpoint(best, out / "best.ckpt")
    (out / "train_log.jsonl").write_text(log_.to_jsonl(), encoding="utf-8")
    run_manifest = {
        "config": cfg.to_dict(),
        "best_epoch": log_.best_epoch,
        "best_val_loss": log_.best_val_loss,
        "files_opened": audit.unique,
        **(extra or {}),
    }
    (out / "run_manifest.json").write_text(json.dumps(run_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(final, best, log_, audit, (extra or {}).get("transfer_report"))


class _Deterministic:
    def __enter__(self):
        self._prev = torch.are_deterministic_algorithms_enabled()
        torch.use_deterministic_algorithms(True)
        return self

    def __exit__(self, *exc):
        torch.use_deterministic_algorithms(self._prev)


# --------------------------------------------------------------------------
# runners


def pretrain_mim(cfg: RunConfig, manifest: Manifest | None = None) -> RunResult:
    """Masked image modelling on unlabeled frames; mask files are never opened."""
    if cfg.stage != "pretrain_mim":
        raise ConfigError(f"pretrain_mim needs stage 'pretrain_mim', got {cfg.stage!r}")
    manifest = manifest or Manifest.load(cfg.manifest_path)
    records = _select(manifest, cfg, cfg.train_splits, labeled=None)
    if not records:
        raise ConfigError(f"no {cfg.domain} frames in splits {cfg.train_splits}")
    rng = np.random.default_rng(cfg.seed)
    with audited() as audit, _Deterministic():
        images = load_images(records, cfg.backbone.image_size)
        model = build_model(cfg.backbone, cfg.seed)
        opt = _optimizer(cfg, model.parameters())
        log_ = TrainLog()
        best_state = copy.deepcopy(model.state_dict())
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            total, count = 0.0, 0
            for idx in _batches(len(images), cfg.batch_size, rng):
                batch = make_masked_batch(images[idx], cfg.mask_ratio, cfg.mask_patch_size, rng)
                loss = masked_mae_loss(batch, model.forward_reconstruct(batch.masked_images))
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            train_loss = total / count
            if log_.add(epoch, train_loss, None, time.perf_counter() - t0):
                best_state = copy.deepcopy(model.state_dict())
            log.info("mim epoch %d loss %.5f", epoch, train_loss)
    return _finish(cfg, model, best_state, log_, audit, "pretrain_mim")


def pretrain_contrastive(cfg: RunConfig, manifest: Manifest | None = None) -> RunResult:
    """MT-NXent pretraining on two augmented views per frame.

    Batches are drawn uniformly from all training frames regardless of video.
    There is no validation criterion; the final epoch is the reference
    checkpoint and ``best.ckpt`` tracks the lowest training loss.
    """
    if cfg.stage != "pretrain_contrastive":
        raise ConfigError(f"pretrain_contrastive needs stage 'pretrain_contrastive', got {cfg.stage!r}")
    manifest = manifest or Manifest.load(cfg.manifest_path)
    records = _select(manifest, cfg, cfg.train_splits, labeled=None)
    if not records:
        raise ConfigError(f"no {cfg.domain} frames in splits {cfg.train_splits}")
    aug = cfg.augmentation or AugmentationConfig(output_size=cfg.backbone.image_size)
    if aug.output_size != cfg.backbone.image_size:
        raise ConfigError("augmentation output_size must equal backbone image_size")
    rng = np.random.default_rng(cfg.seed)
    with audited() as audit, _Deterministic():
        images = load_images(records, cfg.backbone.image_size).numpy()[:, 0]
        model = build_model(cfg.backbone, cfg.seed)
        opt = _optimizer(cfg, model.parameters())
        log_ = TrainLog()
        best_state = copy.deepcopy(model.state_dict())
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            total, count = 0.0, 0
            for idx in _batches(len(images), cfg.batch_size, rng):
                views = [augment_pair(images[i], aug, rng, records[i]) for i in idx]
                va = torch.from_numpy(np.stack([v[0].image for v in views])[:, None])
                vb = torch.from_numpy(np.stack([v[1].image for v in views])[:, None])
                z = model.forward_embed(va)
                zp = model.forward_embed(vb)
                loss = mt_nxent_loss(
                    z,
                    zp,
                    [v[0].video_id for v in views],
                    [v[0].frame_index for v in views],
                    cfg.temperature,
                    cfg.min_frame_gap,
                )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            train_loss = total / count
            if log_.add(epoch, train_loss, None, time.perf_counter() - t0):
                best_state = copy.deepcopy(model.state_dict())
            log.info("contrastive epoch %d loss %.5f", epoch, train_loss)
    return _finish(cfg, model, best_state, log_, audit, "pretrain_contrastive")


@torch.no_grad()
def _val_loss(model: Backbone, images: torch.Tensor, masks: torch.Tensor, batch_size: int, smooth: float) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(images), batch_size):
        pred = torch.sigmoid(model.forward_segment(images[i : i + batch_size]))
        total += dice_bce_loss(pred, masks[i : i + batch_size], smooth).item() * len(pred)
    return total / len(images)


def finetune(
    cfg: RunConfig,
    init_checkpoint: Checkpoint | str | Path | None = None,
    transfer_groups=("embedding", "encoder"),
    manifest: Manifest | None = None,
) -> RunResult:
    """Supervised Dice-BCE training; keeps the checkpoint with the lowest validation loss.

    Without ``init_checkpoint`` this is a from-scratch baseline (lower bound on
    source data, upper bound on labelled target data).
    """
    if cfg.stage not in ("finetune", "baseline"):
        raise ConfigError(f"finetune needs stage 'finetune' or 'baseline', got {cfg.stage!r}")
    if not cfg.val_splits:
        raise ConfigError("fine-tuning needs at least one validation split")
    manifest = manifest or Manifest.load(cfg.manifest_path)
    train_recs = _select(manifest, cfg, cfg.train_splits, labeled=True)
    val_recs = _select(manifest, cfg, cfg.val_splits, labeled=True)
    if not train_recs or not val_recs:
        raise ConfigError(f"no labelled {cfg.domain} frames for splits {cfg.train_splits} / {cfg.val_splits}")

    extra: dict = {}
    model = build_model(cfg.backbone, cfg.seed)
    if init_checkpoint is not None:
        groups = set(transfer_groups)
        if not groups <= TRANSFERABLE:
            raise ConfigError(f"transfer groups must be a subset of {sorted(TRANSFERABLE)}")
        ckpt = init_checkpoint if isinstance(init_checkpoint, Checkpoint) else load_checkpoint(init_checkpoint)
        report = transfer_weights(model, ckpt, groups, seed=cfg.seed + 1)
        digests = group_digests(model)
        for g in groups:
            if digests[g] != ckpt.group_digest(g):
                raise ConfigError(f"group {g} does not match the checkpoint after transfer")
        extra = {
            "transfer_report": report,
            "init_stage": ckpt.metadata.get("stage"),
            "transfer_groups": sorted(groups),
        }

    rng = np.random.default_rng(cfg.seed)
    size = cfg.backbone.image_size
    with audited() as audit, _Deterministic():
        x_train, y_train = load_images(train_recs, size), load_masks(train_recs, size)
        x_val, y_val = load_images(val_recs, size), load_masks(val_recs, size)
        opt = _optimizer(cfg, model.parameters())
        log_ = TrainLog()
        best_state = copy.deepcopy(model.state_dict())
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            total = 0.0
            for idx in _batches(len(x_train), cfg.batch_size, rng):
                pred = torch.sigmoid(model.forward_segment(x_train[idx]))
                loss = dice_bce_loss(pred, y_train[idx], cfg.dice_smooth)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            train_loss = total / len(x_train)
            val_loss = _val_loss(model, x_val, y_val, cfg.batch_size, cfg.dice_smooth)
            if not math.isfinite(train_loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            if log_.add(epoch, train_loss, val_loss, time.perf_counter() - t0):
                best_state = copy.deepcopy(model.state_dict())
            log.info("%s epoch %d train %.5f val %.5f", cfg.stage, epoch, train_loss, val_loss)
    return _finish(cfg, model, best_state, log_, audit, cfg.stage, extra)


@torch.no_grad()
def predict(model: Backbone, records: list[FrameRecord], batch_size: int = 32) -> dict[str, np.ndarray]:
    """Foreground probabilities (sigmoid of logits) keyed by image id."""
    model.eval()
    size = model.config.image_size
    out = {}
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        probs = torch.sigmoid(model.forward_segment(load_images(chunk, size)))[:, 0].numpy()
        for rec, p in zip(chunk, probs):
            out[rec.image_id] = p.astype(np.float32)
    return out


__all__ = [
    "DESK_PRESETS",
    "PAPER_PRESETS",
    "RunConfig",
    "RunResult",
    "TrainLog",
    "finetune",
    "predict",
    "pretrain_contrastive",
    "pretrain_mim",
]
