"""Frame records and the dataset manifest."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal

from xdssl.errors import DataError

Domain = Literal["source", "target"]
Split = Literal["train", "val", "test"]

SPLITS: tuple[str, ...] = ("train", "val", "test")
DOMAINS: tuple[str, ...] = ("source", "target")


@dataclass(frozen=True)
class FrameRecord:
    patient_id: str
    video_id: str
    frame_index: int
    domain: str
    image_path: str
    mask_path: str | None = None
    split: str | None = None

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise DataError(f"negative frame_index for {self.video_id}: {self.frame_index}")
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r}")
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")

    @property
    def image_id(self) -> str:
        return f"{self.video_id}/{self.frame_index:05d}"


@dataclass
class Manifest:
    records: list[FrameRecord]
    split_assignment: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        video_patient: dict[str, str] = {}
        seen: set[tuple[str, int]] = set()
        for rec in self.records:
            owner = video_patient.setdefault(rec.video_id, rec.patient_id)
            if owner != rec.patient_id:
                raise DataError(
                    f"video {rec.video_id} maps to patients {owner} and {rec.patient_id}"
                )
            key = (rec.video_id, rec.frame_index)
            if key in seen:
                raise DataError(f"duplicate frame_index {rec.frame_index} in video {rec.video_id}")
            seen.add(key)
        patient_split: dict[str, str] = {}
        for rec in self.records:
            if rec.split is None:
                continue
            prev = patient_split.setdefault(rec.patient_id, rec.split)
            if prev != rec.split:
                raise DataError(f"patient {rec.patient_id} straddles splits {prev} and {rec.split}")

    @property
    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def select(
        self,
        *,
        domain: str | None = None,
        split: str | Iterable[str] | None = None,
        labeled: bool | None = None,
    ) -> list[FrameRecord]:
        if isinstance(split, str):
            split = {split}
        elif split is not None:
            split = set(split)
        out = []
        for r in self.records:
            if domain is not None and r.domain != domain:
                continue
            if split is not None and r.split not in split:
                continue
            if labeled is not None and (r.mask_path is not None) != labeled:
                continue
            out.append(r)
        return out

    def with_assignment(self, assignment: dict[str, str]) -> Manifest:
        records = []
        for r in self.records:
            if r.patient_id not in assignment:
                raise DataError(f"patient {r.patient_id} missing from split assignment")
            records.append(replace(r, split=assignment[r.patient_id]))
        return Manifest(records, dict(assignment))

    def merged(self, other: Manifest) -> Manifest:
        return Manifest(self.records + other.records, {**self.split_assignment, **other.split_assignment})

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.records], indent=1)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Manifest:
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, list):
            raise DataError(f"manifest {path} must be a JSON array of records")
        keys = {"patient_id", "video_id", "frame_index", "domain", "image_path", "mask_path", "split"}
        records = []
        for i, item in enumerate(raw):
            if not isinstance(item, dict) or not {"patient_id", "video_id", "frame_index", "domain", "image_path"} <= item.keys():
                raise DataError(f"manifest {path}: record {i} is missing required fields")
            extra = set(item) - keys
            if extra:
                raise DataError(f"manifest {path}: record {i} has unknown fields {sorted(extra)}")
            records.append(FrameRecord(**item))
        assignment = {r.patient_id: r.split for r in records if r.split is not None}
        return cls(records, assignment)


def video_frames(records: Iterable[FrameRecord]) -> dict[str, list[FrameRecord]]:
    """Group records by video, each list ordered by frame_index."""
    groups: dict[str, list[FrameRecord]] = {}
    for r in records:
        groups.setdefault(r.video_id, []).append(r)
    return {v: sorted(rs, key=lambda r: r.frame_index) for v, rs in sorted(groups.items())}
