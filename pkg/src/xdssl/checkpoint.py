"""Checkpoint archive and group-wise weight transfer.

Archive layout (all integers little-endian)::

    b"XDSSLCK1"                 8-byte magic
    header_length               uint64
    header                      UTF-8 JSON: metadata + tensor index
    tensor data                 float32 LE, concatenated in index order
    sha256                      32-byte digest of every preceding byte

The index lists ``name``, ``group``, ``shape``, ``offset`` and ``nbytes`` per
tensor, with offsets relative to the start of the tensor data.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from xdssl.errors import CheckpointParseError, IntegrityError, TransferError
from xdssl.model import GROUPS, Backbone, BackboneConfig, build_model, reinitialize, tensor_digest

MAGIC = b"XDSSLCK1"
STAGES = ("pretrain_mim", "pretrain_contrastive", "finetune", "baseline")
_DIGEST_LEN = 32


@dataclass
class Checkpoint:
    groups: dict[str, dict[str, torch.Tensor]]
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> BackboneConfig:
        return BackboneConfig(**self.metadata["backbone"])

    def group_digest(self, group: str) -> str:
        return tensor_digest(self.groups.get(group, {}))

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {name: t for g in GROUPS for name, t in self.groups.get(g, {}).items()}

    def digest(self) -> str:
        return tensor_digest(self.state_dict())


def checkpoint_from_model(model: Backbone, metadata: dict) -> Checkpoint:
    stage = metadata.get("stage")
    if stage not in STAGES:
        raise ValueError(f"checkpoint stage must be one of {STAGES}, got {stage!r}")
    meta = dict(metadata)
    meta.setdefault("backbone", model.config.to_dict())
    meta.setdefault("config_digest", model.config.digest())
    groups = {g: {k: v.detach().clone() for k, v in model.group_parameters(g).items()} for g in GROUPS}
    return Checkpoint(groups, meta)


def save_checkpoint(model: Backbone, metadata: dict, path: str | Path) -> Checkpoint:
    ckpt = checkpoint_from_model(model, metadata)
    write_checkpoint(ckpt, path)
    return ckpt


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    index = []
    blobs = []
    offset = 0
    for group in GROUPS:
        for name in sorted(ckpt.groups.get(group, {})):
            arr = ckpt.groups[group][name].detach().cpu().to(torch.float32).numpy().astype("<f4")
            data = arr.tobytes()
            index.append({"name": name, "group": group, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = json.dumps({"metadata": ckpt.metadata, "tensors": index}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + _DIGEST_LEN:
        raise IntegrityError(f"{path}: file too short to be a checkpoint ({len(raw)} bytes)")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointParseError(f"{path}: bad magic", 0)
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    if start + header_len > len(raw) - _DIGEST_LEN:
        raise IntegrityError(f"{path}: truncated header (declares {header_len} bytes)")
    body, digest = raw[:-_DIGEST_LEN], raw[-_DIGEST_LEN:]
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointParseError(f"{path}: header is not UTF-8", start + exc.start) from exc
    except json.JSONDecodeError as exc:
        raise CheckpointParseError(f"{path}: malformed header JSON: {exc.msg}", start + exc.pos) from exc
    data_start = start + header_len
    data_len = len(body) - data_start
    expected = sum(t["nbytes"] for t in header.get("tensors", []))
    if expected != data_len:
        raise IntegrityError(f"{path}: tensor data is {data_len} bytes, index declares {expected}")
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: digest mismatch")

    groups: dict[str, dict[str, torch.Tensor]] = {g: {} for g in GROUPS}
    for entry in header["tensors"]:
        lo = data_start + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=entry["nbytes"] // 4, offset=lo)
        groups[entry["group"]][entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
    return Checkpoint(groups, header["metadata"])


def load_into(model: Backbone, ckpt: Checkpoint) -> None:
    transfer_weights(model, ckpt, GROUPS)


def model_from_checkpoint(ckpt: Checkpoint) -> Backbone:
    model = build_model(ckpt.config, seed=int(ckpt.metadata.get("rng_seed", 0)))
    load_into(model, ckpt)
    return model


def transfer_weights(model: Backbone, ckpt: Checkpoint, groups, seed: int | None = None) -> dict:
    """Copy ``groups`` from ``ckpt`` into ``model``; freshly initialise the rest.

    Shapes are checked for every requested group before anything is written,
    so a failed transfer leaves the model untouched. Returns a per-group
    report of parameter counts, digests and whether the group was copied.
    """
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise TransferError(f"unknown parameter groups {sorted(unknown)}")
    for g in groups:
        target = model.group_parameters(g)
        source = ckpt.groups.get(g, {})
        if set(target) != set(source):
            missing = sorted(set(target) ^ set(source))
            raise TransferError(f"group {g!r}: tensor names differ, e.g. {missing[:3]}")
        for name, t in target.items():
            if tuple(t.shape) != tuple(source[name].shape):
                raise TransferError(
                    f"tensor {name}: checkpoint shape {tuple(source[name].shape)} != model shape {tuple(t.shape)}"
                )

    rest = set(GROUPS) - groups
    if rest:
        if seed is None:
            seed = int(ckpt.metadata.get("rng_seed", 0)) + 7919
        reinitialize(model, rest, seed)
    with torch.no_grad():
        for g in groups:
            module = getattr(model, g)
            prefix = g + "."
            state = {k[len(prefix) :]: v for k, v in ckpt.groups[g].items()}
            module.load_state_dict(state, strict=True)

    report = {}
    for g in GROUPS:
        params = model.group_parameters(g)
        report[g] = {
            "transferred": g in groups,
            "parameters": int(sum(t.numel() for t in params.values())),
            "digest": tensor_digest(params),
            "checkpoint_digest": ckpt.group_digest(g),
        }
    return report
