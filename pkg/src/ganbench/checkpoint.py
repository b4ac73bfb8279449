"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic     8 bytes  b"GBCKPT01"
    version   u32      format version, currently 1
    digest    32 bytes sha256 of the canonical model-config JSON
    cfg_len   u32      length of the config JSON
    cfg       utf-8    canonical model-config JSON
    meta_len  u32      length of the meta JSON (step counters)
    meta      utf-8    meta JSON
    count     u32      number of blobs
    per blob: u16 name length, name utf-8, u8 ndim, ndim * u32 dims,
              then row-major float32 data

Round-trips are bit-exact, which is why the format only accepts float32
blobs; float64 models (used for gradient checking) cannot be checkpointed.
Loads validate the magic, version, digest and all lengths, so a truncated or
corrupted file raises :class:`CheckpointError` without yielding partial
state.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Discriminator, Generator, ModelConfig

__all__ = ["CheckpointError", "CheckpointData", "save_checkpoint", "load_checkpoint",
           "gather_state", "restore_state"]

MAGIC = b"GBCKPT01"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _canonical_config_json(cfg: ModelConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


@dataclass
class CheckpointData:
    config: ModelConfig
    step: int
    meta: dict
    blobs: dict[str, np.ndarray]


def save_checkpoint(path, cfg: ModelConfig, step: int, meta: dict,
                    blobs: dict[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    cfg_json = _canonical_config_json(cfg)
    meta_json = json.dumps({"step": int(step), **meta}, sort_keys=True,
                           separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg_json).digest(),
             struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<I", len(meta_json)), meta_json,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoint blobs must be float32, got {arr.dtype} for {name!r}; "
                "float64 models are for gradient checking and cannot be checkpointed")
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint file: {self.path}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    digest = r.take(32)
    cfg_json = r.take(r.u32())
    if hashlib.sha256(cfg_json).digest() != digest:
        raise CheckpointError(f"config digest mismatch (corrupt checkpoint): {path}")
    meta = json.loads(r.take(r.u32()).decode())
    step = int(meta.pop("step"))
    blobs: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(struct.unpack("<H", r.take(2))[0]).decode()
        ndim = struct.unpack("<B", r.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        blobs[name] = data.astype(np.float32)  # owned, writable copy
    if r.pos != len(r.blob):
        raise CheckpointError(f"trailing bytes after checkpoint payload: {path}")
    try:
        config = ModelConfig.from_dict(json.loads(cfg_json.decode()))
    except TypeError as exc:
        raise CheckpointError(f"unreadable model config in {path}: {exc}") from exc
    return CheckpointData(config=config, step=step, meta=meta, blobs=blobs)


def gather_state(generator: Generator, discriminator: Discriminator,
                 opt_g=None, opt_d=None) -> dict[str, np.ndarray]:
    """Named float32 blobs for all parameters, buffers and optimizer moments."""
    blobs: dict[str, np.ndarray] = {}
    for name, t in generator.named_parameters():
        blobs[f"g.param.{name}"] = t.data
    for name, b in generator.named_buffers():
        blobs[f"g.buffer.{name}"] = b
    for name, t in discriminator.named_parameters():
        blobs[f"d.param.{name}"] = t.data
    for name, b in discriminator.named_buffers():
        blobs[f"d.buffer.{name}"] = b
    if opt_g is not None:
        blobs.update(opt_g.state_blobs("opt_g"))
    if opt_d is not None:
        blobs.update(opt_d.state_blobs("opt_d"))
    return blobs


def restore_state(ckpt: CheckpointData, cfg: ModelConfig, generator: Generator,
                  discriminator: Discriminator, opt_g=None, opt_d=None) -> None:
    """Copy checkpoint blobs into an existing model; configs must match."""
    if ckpt.config.to_dict() != cfg.to_dict():
        if ckpt.config.variant != cfg.variant:
            raise CheckpointError(
                f"checkpoint was written by variant {ckpt.config.variant} and cannot "
                f"be loaded into a {cfg.variant} model")
        diffs = [k for k, v in ckpt.config.to_dict().items() if cfg.to_dict()[k] != v]
        raise CheckpointError(
            f"checkpoint config does not match the model (differs in: {', '.join(diffs)})")
    targets: dict[str, np.ndarray] = {}
    for name, t in generator.named_parameters():
        targets[f"g.param.{name}"] = t.data
    for name, b in generator.named_buffers():
        targets[f"g.buffer.{name}"] = b
    for name, t in discriminator.named_parameters():
        targets[f"d.param.{name}"] = t.data
    for name, b in discriminator.named_buffers():
        targets[f"d.buffer.{name}"] = b
    if opt_g is not None:
        targets.update(opt_g.state_targets("opt_g"))
        opt_g.t = int(ckpt.meta.get("opt_g_t", 0))
    if opt_d is not None:
        targets.update(opt_d.state_targets("opt_d"))
        opt_d.t = int(ckpt.meta.get("opt_d_t", 0))
    ignored = tuple(p for p, opt in (("opt_g.", opt_g), ("opt_d.", opt_d)) if opt is None)
    missing = sorted(set(targets) - set(ckpt.blobs))
    extra = sorted(k for k in set(ckpt.blobs) - set(targets)
                   if not k.startswith(ignored))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint state does not line up with the model "
            f"(missing: {missing[:4]}, unexpected: {extra[:4]})")
    for name, dst in targets.items():
        src = ckpt.blobs[name]
        if src.shape != dst.shape:
            raise CheckpointError(
                f"blob {name!r} has shape {src.shape}, expected {dst.shape}")
        np.copyto(dst, src)
