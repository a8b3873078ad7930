"""End-to-end experiment: phantom -> split -> pretrain -> fine-tune -> fuse -> evaluate.

Stage seeds are derived from one master seed::

    seed(stage) = SeedSequence([master, crc32(stage)]).generate_state(1)[0]

so any stage can be rerun on its own with the seed the full pipeline used.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from xdssl.checkpoint import load_checkpoint, model_from_checkpoint
from xdssl.data.audit import audited, write_png
from xdssl.data.phantom import PhantomConfig, generate_phantom
from xdssl.data.records import Manifest
from xdssl.data.split import patient_split
from xdssl.evaluation import emit_report, evaluate_run, load_probability, save_probability
from xdssl.errors import ConfigError, DataError
from xdssl.fusion import STRATEGIES, FusionInputs, fuse
from xdssl.model import BackboneConfig
from xdssl.training import RunConfig, finetune, predict, pretrain_contrastive, pretrain_mim

log = logging.getLogger(__name__)

BRANCHES = ("mim", "contrastive")
SELECT = "select"


def derive_seed(master: int, stage: str) -> int:
    return int(np.random.SeedSequence([master, zlib.crc32(stage.encode())]).generate_state(1)[0])


@dataclass
class StageParams:
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    weight_decay: float | None = None
    optimizer: str | None = None

    def overrides(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class ExperimentConfig:
    seed: int = 0
    image_size: int = 64
    source_phantom: dict = field(default_factory=dict)
    target_phantom: dict = field(default_factory=lambda: {"label_every": 2})
    source_fractions: dict = field(default_factory=lambda: {"train": 0.68, "val": 0.16, "test": 0.16})
    target_fractions: dict = field(default_factory=lambda: {"train": 0.7, "val": 0.15, "test": 0.15})
    backbone: dict = field(default_factory=dict)
    mask_ratio: float = 0.6
    mask_patch_size: int = 8
    temperature: float = 0.5
    min_frame_gap: int = 15
    transfer_groups: tuple[str, ...] = ("embedding", "encoder")
    fusion_strategy: str = SELECT
    fusion_scope: str = "image"
    entropy_base: float = 2.0
    threshold: float = 0.5
    overlays: bool = False
    pretrain_mim: StageParams = field(default_factory=StageParams)
    pretrain_contrastive: StageParams = field(default_factory=StageParams)
    finetune: StageParams = field(default_factory=StageParams)
    baseline: StageParams = field(default_factory=StageParams)

    def __post_init__(self) -> None:
        for name in ("pretrain_mim", "pretrain_contrastive", "finetune", "baseline"):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, StageParams(**value))
        self.transfer_groups = tuple(self.transfer_groups)
        if self.fusion_strategy not in STRATEGIES + (SELECT,):
            raise ConfigError(f"fusion_strategy must be one of {STRATEGIES + (SELECT,)}")
        self.backbone_config()  # validates

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**{"image_size": self.image_size, **self.backbone})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transfer_groups"] = list(self.transfer_groups)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def smoke(cls, seed: int = 0) -> ExperimentConfig:
        """Tiny configuration for determinism and plumbing checks (seconds, not minutes)."""
        small = {"n_patients": 6, "frames_per_video": 6}
        one = StageParams(epochs=1)
        return cls(
            seed=seed,
            image_size=32,
            source_phantom=small,
            target_phantom={**small, "label_every": 2},
            target_fractions={"train": 0.5, "val": 0.25, "test": 0.25},
            backbone={"encoder_depth": 1, "encoder_dim": 32, "encoder_heads": 2, "decoder_channels": [16, 16, 8]},
            min_frame_gap=3,
            pretrain_mim=one,
            pretrain_contrastive=StageParams(epochs=1, batch_size=8),
            finetune=one,
            baseline=one,
        )


def _run_config(exp: ExperimentConfig, stage: str, params: StageParams, out: Path, name: str, **kw) -> RunConfig:
    return RunConfig.preset(
        stage,
        manifest_path=str(out / "manifest.json"),
        output_dir=str(out / "runs" / name),
        seed=derive_seed(exp.seed, name),
        backbone=exp.backbone_config(),
        mask_ratio=exp.mask_ratio,
        mask_patch_size=exp.mask_patch_size,
        temperature=exp.temperature,
        min_frame_gap=exp.min_frame_gap,
        **{**params.overrides(), **kw},
    )


def build_dataset(exp: ExperimentConfig, out: Path) -> Manifest:
    base = {"image_size": exp.image_size}
    src_cfg = PhantomConfig.for_profile(
        "A_source", **{**base, "rng_seed": derive_seed(exp.seed, "phantom/source"), **exp.source_phantom}
    )
    tgt_cfg = PhantomConfig.for_profile(
        "B_target", **{**base, "rng_seed": derive_seed(exp.seed, "phantom/target"), **exp.target_phantom}
    )
    source = generate_phantom(src_cfg, out / "data" / "source")
    target = generate_phantom(tgt_cfg, out / "data" / "target")
    source = patient_split(source, exp.source_fractions, derive_seed(exp.seed, "split/source"))
    target = patient_split(target, exp.target_fractions, derive_seed(exp.seed, "split/target"))
    manifest = source.merged(target)
    manifest.save(out / "manifest.json")
    return manifest


def infer_split(ckpt_path: Path, manifest: Manifest, domain: str, split: str, pred_dir: Path) -> None:
    model = model_from_checkpoint(load_checkpoint(ckpt_path))
    records = sorted(manifest.select(domain=domain, split=split), key=lambda r: r.image_id)
    probs = predict(model, records)
    for rec in records:
        save_probability(pred_dir, rec, probs[rec.image_id])


def fuse_predictions(
    dir_g: Path, dir_c: Path, records, out_dir: Path, strategy: str, scope: str = "image", entropy_base: float = 2.0
) -> None:
    """Fuse two prediction directories frame by frame (or as one batch for ``scope='batch'``)."""
    records = sorted(records, key=lambda r: r.image_id)
    maps_g, maps_c = [], []
    for rec in records:
        pg, pc = load_probability(dir_g, rec), load_probability(dir_c, rec)
        if pg is None or pc is None:
            raise DataError(f"missing branch prediction for {rec.image_id}")
        maps_g.append(pg)
        maps_c.append(pc)
    if not records:
        return
    fused = fuse(FusionInputs(np.stack(maps_g), np.stack(maps_c), strategy, scope=scope, entropy_base=entropy_base))
    for rec, prob, mask in zip(records, fused.probabilities, fused.binary_mask):
        save_probability(out_dir, rec, prob)
        mask_path = out_dir / rec.video_id / f"{rec.frame_index:05d}_mask.png"
        write_png(mask_path, mask.astype(np.uint8) * 255)


def select_fusion_strategy(
    dir_g: Path,
    dir_c: Path,
    records,
    work_dir: Path,
    scope: str = "image",
    entropy_base: float = 2.0,
    threshold: float = 0.5,
) -> tuple[str, dict[str, float]]:
    """Pick the fusion strategy with the best mean DSC on labelled ``records``.

    Meant for the source validation split, so no target label is consulted.
    Ties go to the earlier entry of ``STRATEGIES``.
    """
    scores = {}
    for strategy in STRATEGIES:
        out = work_dir / strategy
        fuse_predictions(dir_g, dir_c, records, out, strategy, scope, entropy_base)
        scores[strategy] = evaluate_run(out, records, threshold, name=strategy).mean_dsc
    best = max(STRATEGIES, key=lambda s: (scores[s], -STRATEGIES.index(s)))
    return best, scores


def audit_violations(manifest: Manifest, stage_files: dict[str, list[str]]) -> list[str]:
    """Check the data-isolation contract over the files each stage opened."""
    kinds: dict[str, tuple[str, str]] = {}
    for r in manifest.records:
        kinds[str(Path(r.image_path).resolve())] = (r.domain, "image")
        if r.mask_path:
            kinds[str(Path(r.mask_path).resolve())] = (r.domain, "mask")
    rules = {
        # stage: (allowed domain, labels allowed)
        "pretrain_mim": ("target", False),
        "pretrain_contrastive": ("target", False),
        "finetune_mim": ("source", True),
        "finetune_contrastive": ("source", True),
        "lower_bound": ("source", True),
        "upper_bound": ("target", True),
        "fusion_selection": ("source", True),
    }
    problems = []
    for stage, files in stage_files.items():
        if stage not in rules:
            continue
        domain, labels_ok = rules[stage]
        for f in files:
            kind = kinds.get(f)
            if kind is None and f.endswith(".npy"):
                # probability maps written by an earlier inference step, not raw data
                continue
            if kind is None:
                problems.append(f"{stage}: opened unknown file {f}")
            elif kind[0] != domain:
                problems.append(f"{stage}: opened {kind[0]} {kind[1]} {f}")
            elif kind[1] == "mask" and not labels_ok:
                problems.append(f"{stage}: opened label {f}")
    return problems


def reproduce(exp: ExperimentConfig, out: str | Path) -> dict:
    """Run every stage and return the report dict (also written to ``report/report.json``)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True) + "\n")
    timings: dict[str, float] = {}

    def timed(name, fn, *a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        timings[name] = time.perf_counter() - t0
        log.info("stage %s finished in %.1fs", name, timings[name])
        return res

    manifest = timed("phantom+split", build_dataset, exp, out)

    mim = timed(
        "pretrain_mim",
        pretrain_mim,
        _run_config(exp, "pretrain_mim", exp.pretrain_mim, out, "pretrain_mim", domain="target"),
        manifest,
    )
    con = timed(
        "pretrain_contrastive",
        pretrain_contrastive,
        _run_config(exp, "pretrain_contrastive", exp.pretrain_contrastive, out, "pretrain_contrastive", domain="target"),
        manifest,
    )
    # contrastive pretraining has no validation criterion: transfer the final epoch
    inits = {"mim": mim.checkpoint, "contrastive": con.checkpoint}
    runs = {}
    for branch in BRANCHES:
        name = f"finetune_{branch}"
        cfg = _run_config(exp, "finetune", exp.finetune, out, name, domain="source", val_splits=("val",))
        runs[name] = timed(name, finetune, cfg, inits[branch], exp.transfer_groups, manifest)
    cfg = _run_config(exp, "baseline", exp.baseline, out, "lower_bound", domain="source", val_splits=("val",))
    runs["lower_bound"] = timed("lower_bound", finetune, cfg, None, (), manifest)
    cfg = _run_config(exp, "baseline", exp.baseline, out, "upper_bound", domain="target", val_splits=("val",))
    runs["upper_bound"] = timed("upper_bound", finetune, cfg, None, (), manifest)

    stage_files = {"pretrain_mim": mim.audit.unique, "pretrain_contrastive": con.audit.unique}
    stage_files.update({k: v.audit.unique for k, v in runs.items()})
    test = manifest.select(domain="target", split="test")
    pred_root = out / "predictions"
    for name in runs:
        timed(f"infer_{name}", infer_split, Path(runs[name].output_dir) / "best.ckpt", manifest, "target", "test", pred_root / name)

    branch_dirs = (pred_root / "finetune_mim", pred_root / "finetune_contrastive")
    strategy, val_scores = exp.fusion_strategy, None
    if strategy == SELECT:
        # choose the fusion rule on the labelled source validation split
        val_root = out / "selection"
        with audited() as sel_audit:
            for branch in ("finetune_mim", "finetune_contrastive"):
                infer_split(Path(runs[branch].output_dir) / "best.ckpt", manifest, "source", "val", val_root / branch)
            strategy, val_scores = select_fusion_strategy(
                val_root / "finetune_mim",
                val_root / "finetune_contrastive",
                manifest.select(domain="source", split="val"),
                val_root / "fused",
                exp.fusion_scope,
                exp.entropy_base,
                exp.threshold,
            )
        stage_files["fusion_selection"] = sel_audit.unique
        log.info("fusion strategy %s selected on source validation %s", strategy, val_scores)
    violations = audit_violations(manifest, stage_files)
    (out / "audit.json").write_text(
        json.dumps({"stages": stage_files, "violations": violations}, indent=2, sort_keys=True) + "\n"
    )

    fuse_predictions(*branch_dirs, test, pred_root / "fused", strategy, exp.fusion_scope, exp.entropy_base)
    variants = [f"fused_{s}" for s in STRATEGIES]
    for s in STRATEGIES:
        fuse_predictions(*branch_dirs, test, pred_root / f"fused_{s}", s, exp.fusion_scope, exp.entropy_base)

    names = ["lower_bound", "finetune_mim", "finetune_contrastive", "fused", "upper_bound"] + variants
    scores = [evaluate_run(pred_root / n, test, exp.threshold, name=n) for n in names]
    pairings = [("fused", n) for n in names if n not in ("fused", f"fused_{strategy}")]
    overlays = {n: (pred_root / n, test) for n in names} if exp.overlays else None
    report = emit_report(scores, pairings, out / "report", overlays, exp.threshold)
    selection = {"strategy": strategy, "source_val_dsc": val_scores}
    (out / "report" / "fusion_selection.json").write_text(json.dumps(selection, indent=2, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return report


__all__ = [
    "ExperimentConfig",
    "StageParams",
    "audit_violations",
    "derive_seed",
    "reproduce",
    "select_fusion_strategy",
]
