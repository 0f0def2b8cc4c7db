"""Checkpoint serialization.

Tensor container ("SPLATN1\\n" magic): u32 tensor count, then per tensor a
u16 name length, utf-8 name, u8 rank, u64 dims, and float32 little-endian
data, in declaration order.

A checkpoint bundle is a directory:
  meta.json        version, config hash, condition dims, frame count
  config.json      full TrainConfig
  mouth.field      SPLATF1 canonical fields
  face.field
  branches.net     SPLATN1: branch parameters plus encoder bounding boxes
  optimizer.state  SPLATN1: most recent stage's optimizer moments (optional)
  background.png   composite background
  conditions.jsonl per-frame conditioning (drives the render service)

Bundle writes are atomic: everything lands in a temp directory that is
renamed over the target.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pngio
from .deformation import BranchSet
from .metrics import VA_POINTS
from .pipeline import TalkingHeadModel
from .scene import (
    FrameConditions,
    MalformedHeaderError,
    TruncatedFileError,
    load_field,
    save_field,
)
from .training.config import TrainConfig

TENSOR_MAGIC = b"SPLATN1\n"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < len(TENSOR_MAGIC) + 4 or data[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise MalformedHeaderError(f"{path}: not a SPLATN1 tensor file")
    off = len(TENSOR_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            n = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off)
            off += 4 * n
            out[name] = arr.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise TruncatedFileError(f"{path}: truncated tensor file ({exc})") from exc
    if off != len(data):
        raise MalformedHeaderError(f"{path}: {len(data) - off} trailing bytes")
    return out


@dataclass
class Checkpoint:
    model: TalkingHeadModel
    conditions: list
    background: np.ndarray
    config: TrainConfig
    meta: dict

    @property
    def frame_count(self) -> int:
        return len(self.conditions)


def _branch_tensors(model: TalkingHeadModel) -> dict:
    tensors = dict(model.branches.named_params())
    for bname, branch in model.branches.branches().items():
        tensors[f"{bname}.encoder.bbox"] = np.stack([branch.encoder.bbox_lo, branch.encoder.bbox_hi])
    return tensors


def save_checkpoint(
    path,
    model: TalkingHeadModel,
    conditions: list,
    background: np.ndarray,
    config: TrainConfig,
    optimizer_state: dict | None = None,
) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    save_field(model.mouth_canonical, tmp / "mouth.field")
    save_field(model.face_canonical, tmp / "face.field")
    save_tensors(tmp / "branches.net", _branch_tensors(model))
    if optimizer_state is not None:
        save_tensors(tmp / "optimizer.state", optimizer_state)
    pngio.write_color(tmp / "background.png", background)
    with open(tmp / "conditions.jsonl", "w") as f:
        for c in conditions:
            f.write(json.dumps(c.to_json()) + "\n")
    with open(tmp / "config.json", "w") as f:
        json.dump(config.to_json(), f, indent=1, sort_keys=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config_hash": config.hash(),
        "condition_dims": {
            "a": int(conditions[0].audio.shape[0]) if conditions else 0,
            "u": int(conditions[0].action_units.shape[0]) if conditions else 0,
            "e": 2,
        },
        "frame_count": len(conditions),
        "va_points": [list(p) for p in VA_POINTS],
    }
    with open(tmp / "meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    if path.exists():
        shutil.rmtree(path)
    os.rename(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path / "meta.json") as f:
        meta = json.load(f)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    with open(path / "config.json") as f:
        config = TrainConfig.from_json(json.load(f))
    mouth = load_field(path / "mouth.field")
    face = load_field(path / "face.field")
    dims = meta["condition_dims"]
    branches = BranchSet(
        audio_dim=dims["a"], au_dim=dims["u"], seed=config.seed, **config.encoder_kwargs()
    )
    tensors = load_tensors(path / "branches.net")
    for name, arr in branches.named_params().items():
        if name not in tensors:
            raise MalformedHeaderError(f"{path}: checkpoint missing tensor {name!r}")
        if tuple(tensors[name].shape) != arr.shape:
            raise MalformedHeaderError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}"
            )
        arr[...] = tensors[name]
    for bname, branch in branches.branches().items():
        bbox = tensors.get(f"{bname}.encoder.bbox")
        if bbox is not None:
            branch.encoder.set_bbox(bbox[0].astype(np.float64), bbox[1].astype(np.float64))
    conditions = []
    with open(path / "conditions.jsonl") as f:
        for line in f:
            if line.strip():
                conditions.append(FrameConditions.from_json(json.loads(line)))
    background = pngio.read_color(path / "background.png")
    model = TalkingHeadModel(mouth_canonical=mouth, face_canonical=face, branches=branches)
    return Checkpoint(model=model, conditions=conditions, background=background, config=config, meta=meta)
