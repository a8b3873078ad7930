"""Segmentation metrics, per-run scoring and report emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

from xdssl.data.audit import read_png, record_access
from xdssl.data.preprocess import pad_and_resize, prepare_mask
from xdssl.data.records import FrameRecord
from xdssl.errors import DataError, InvalidInputError
from xdssl.stats import wilcoxon_signed_rank

CSV_COLUMNS = ("image_id", "video_id", "patient_id", "dsc", "iou")
METRICS = ("dsc", "iou")


def _as_masks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def overlap_counts(pred, gt) -> tuple[int, int, int]:
    """(|A and B|, |A|, |B|)."""
    pred, gt = _as_masks(pred, gt)
    return int(np.logical_and(pred, gt).sum()), int(pred.sum()), int(gt.sum())


def dsc(pred, gt) -> float:
    inter, a, b = overlap_counts(pred, gt)
    if a + b == 0:
        return 1.0
    return 2.0 * inter / (a + b)


def iou(pred, gt) -> float:
    inter, a, b = overlap_counts(pred, gt)
    union = a + b - inter
    if union == 0:
        return 1.0
    return inter / union


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    video_id: str
    patient_id: str
    dsc: float
    iou: float


@dataclass
class RunScores:
    name: str
    scores: list[ImageScore] = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([s.dsc for s in self.scores])) if self.scores else float("nan")

    @property
    def mean_iou(self) -> float:
        return float(np.mean([s.iou for s in self.scores])) if self.scores else float("nan")

    def column(self, metric: str) -> dict[str, float]:
        return {s.image_id: getattr(s, metric) for s in self.scores}

    def aggregate(self) -> dict:
        return {"n_images": len(self.scores), "mean_dsc": self.mean_dsc, "mean_iou": self.mean_iou}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in self.scores:
            writer.writerow([s.image_id, s.video_id, s.patient_id, repr(s.dsc), repr(s.iou)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, name: str, path: str | Path) -> RunScores:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(name, [ImageScore(r["image_id"], r["video_id"], r["patient_id"], float(r["dsc"]), float(r["iou"])) for r in rows])


def prediction_path(pred_dir: str | Path, record: FrameRecord, suffix: str) -> Path:
    return Path(pred_dir) / record.video_id / f"{record.frame_index:05d}{suffix}"


def load_probability(pred_dir: str | Path, record: FrameRecord) -> np.ndarray | None:
    """Float sidecar if present, otherwise the 8-bit PNG scaled by 1/255."""
    npy = prediction_path(pred_dir, record, ".npy")
    if npy.exists():
        record_access(npy)
        return np.load(npy).astype(np.float64)
    png = prediction_path(pred_dir, record, ".png")
    if png.exists():
        return read_png(png).astype(np.float64)
    return None


def save_probability(pred_dir: str | Path, record: FrameRecord, prob: np.ndarray) -> None:
    npy = prediction_path(pred_dir, record, ".npy")
    npy.parent.mkdir(parents=True, exist_ok=True)
    np.save(npy, np.asarray(prob, dtype=np.float32))
    arr = np.clip(np.rint(np.asarray(prob) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(prediction_path(pred_dir, record, ".png"))


def evaluate_run(
    pred_dir: str | Path,
    records: Sequence[FrameRecord],
    threshold: float = 0.5,
    name: str | None = None,
) -> RunScores:
    """Score thresholded predictions against every annotated frame in ``records``."""
    labeled = sorted((r for r in records if r.mask_path is not None), key=lambda r: r.image_id)
    probs = {}
    missing = []
    for rec in labeled:
        p = load_probability(pred_dir, rec)
        if p is None:
            missing.append(rec.image_id)
        else:
            probs[rec.image_id] = p
    if missing:
        raise DataError(f"missing predictions for {len(missing)} image(s): {', '.join(missing)}")
    run = RunScores(name or Path(pred_dir).name)
    for rec in labeled:
        pred = probs[rec.image_id] >= threshold
        gt = prepare_mask(read_png(rec.mask_path), pred.shape[0]) > 0.5
        run.scores.append(ImageScore(rec.image_id, rec.video_id, rec.patient_id, dsc(pred, gt), iou(pred, gt)))
    return run


def paired_tests(a: RunScores, b: RunScores) -> list[dict]:
    out = []
    for metric in METRICS:
        ca, cb = a.column(metric), b.column(metric)
        common = sorted(set(ca) & set(cb))
        if len(common) != len(ca) or len(common) != len(cb):
            raise DataError(f"runs {a.name} and {b.name} score different image sets")
        res = wilcoxon_signed_rank([ca[k] for k in common], [cb[k] for k in common])
        out.append({"a": a.name, "b": b.name, "metric": metric, **res.to_dict()})
    return out


def contour(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask)


def overlay_image(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """RGB overlay: ground-truth contour green, prediction contour red."""
    base = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    rgb = np.stack([base] * 3, axis=-1)
    rgb[contour(gt)] = (0, 255, 0)
    rgb[contour(pred)] = (255, 0, 0)
    return rgb


def emit_report(
    runs: Sequence[RunScores],
    pairings: Iterable[tuple[str, str]],
    out_dir: str | Path,
    overlays: dict[str, tuple[str | Path, Sequence[FrameRecord]]] | None = None,
    threshold: float = 0.5,
) -> dict:
    """Write per-run CSVs, ``report.json`` and optional overlays; return the report dict."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        by_name = {r.name: r for r in runs}
        for run in runs:
            (out_dir / f"scores_{run.name}.csv").write_text(run.to_csv(), encoding="utf-8")
        tests = []
        for a, b in pairings:
            if a not in by_name or b not in by_name:
                raise DataError(f"pairing ({a}, {b}) names an unknown run")
            tests.extend(paired_tests(by_name[a], by_name[b]))
        report = {
            "threshold": threshold,
            "runs": {r.name: r.aggregate() for r in runs},
            "pairwise": tests,
        }
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for name, (pred_dir, records) in (overlays or {}).items():
            for rec in records:
                if rec.mask_path is None:
                    continue
                prob = load_probability(pred_dir, rec)
                if prob is None:
                    continue
                size = prob.shape[0]
                img = pad_and_resize(read_png(rec.image_path), size)
                gt = prepare_mask(read_png(rec.mask_path), size) > 0.5
                path = out_dir / "overlays" / name / rec.video_id / f"{rec.frame_index:05d}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(overlay_image(img, gt, prob >= threshold), mode="RGB").save(path)
    except OSError as exc:
        raise DataError(f"cannot write report under {out_dir}: {exc}") from exc
    return report
