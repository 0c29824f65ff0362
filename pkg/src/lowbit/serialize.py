"""Checkpoint files: a JSON manifest next to a raw binary tensor blob.

One directory per checkpoint:

    manifest.json   format marker, model config, named tensor index
                    (name, shape, dtype, offset, nbytes), clip parameters,
                    optimizer state index, RNG state
    tensors.bin     concatenated little-endian raw arrays, in index order

Round trips are bit-exact: arrays are written as raw bytes and clip values
as Python floats (JSON repr round-trips doubles exactly).  The quantized
(PTQ) checkpoint reuses the same blob mechanics with its own manifest
schema; see ``lowbit.ptq``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import InputError
from .fakequant import ClipParam
from .model import ModelConfig, TransformerLM

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
FORMAT_TRAIN = "lowbit-checkpoint"


class BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.index: list[dict] = []
        self.offset = 0

    def add(self, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        self.index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": self.offset,
            "nbytes": len(raw),
        })
        self.chunks.append(raw)
        self.offset += len(raw)

    def write(self, path: Path) -> None:
        with open(path, "wb") as fh:
            for chunk in self.chunks:
                fh.write(chunk)


class BlobReader:
    def __init__(self, path: Path, index: list[dict]):
        with open(path, "rb") as fh:
            self.raw = fh.read()
        self.entries = {e["name"]: e for e in index}

    def get(self, name: str) -> np.ndarray:
        e = self.entries[name]
        arr = np.frombuffer(self.raw, dtype=np.dtype(e["dtype"]),
                            count=int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1,
                            offset=e["offset"])
        return arr.reshape(e["shape"]).copy()

    def names(self):
        return list(self.entries)


def _clip_to_dict(c: ClipParam) -> dict:
    return {
        "clip_lo": c.clip_lo, "clip_hi": c.clip_hi, "bits": c.bits,
        "align_zero": c.align_zero, "bounded_input": c.bounded_input,
        "sign_in_range": c.sign_in_range,
    }


def _clip_from_dict(d: dict) -> ClipParam:
    return ClipParam(**d)


def save_checkpoint(ckpt_dir, model: TransformerLM, step: int = 0,
                    optimizer_state: dict | None = None,
                    rng_state: dict | None = None) -> Path:
    """Write the model (and optionally full training state) to ``ckpt_dir``."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    blob = BlobWriter()
    for name, t in model.params.items():
        blob.add(name, t.data)
    if optimizer_state:
        for name, arr in optimizer_state["m"].items():
            blob.add(f"adam.m.{name}", arr)
        for name, arr in optimizer_state["v"].items():
            blob.add(f"adam.v.{name}", arr)
    manifest = {
        "format": FORMAT_TRAIN,
        "version": 1,
        "step": step,
        "model_config": model.cfg.to_dict(),
        "act_mode": model.act_mode,
        "act_bits": model.act_bits,
        "clips": {k: _clip_to_dict(c) for k, c in model.clips.items()},
        "has_optimizer": bool(optimizer_state),
        "rng_state": rng_state,
        "tensors": blob.index,
    }
    blob.write(ckpt_dir / BLOB_NAME)
    tmp = ckpt_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, ckpt_dir / MANIFEST_NAME)
    return ckpt_dir


def load_checkpoint(ckpt_dir):
    """Read a checkpoint; returns (model, step, optimizer_state, rng_state)."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise InputError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_TRAIN:
        raise InputError(f"not a model checkpoint: {manifest_path}")
    reader = BlobReader(ckpt_dir / BLOB_NAME, manifest["tensors"])
    model = TransformerLM(ModelConfig.from_dict(manifest["model_config"]))
    for name, t in model.params.items():
        t.data = reader.get(name).astype(t.data.dtype, copy=False)
    model.clips = {k: _clip_from_dict(d) for k, d in manifest["clips"].items()}
    model.act_mode = manifest.get("act_mode", "train")
    model.act_bits = manifest.get("act_bits", model.cfg.qat_bits)
    optimizer_state = None
    if manifest.get("has_optimizer"):
        m = {name: reader.get(f"adam.m.{name}") for name in model.params}
        v = {name: reader.get(f"adam.v.{name}") for name in model.params}
        optimizer_state = {"m": m, "v": v}
    return model, manifest["step"], optimizer_state, manifest.get("rng_state")
