"""
Checkpoint files.

Layout (all little-endian):

    b"ARHF" | u32 version | u32 meta_len | meta JSON (utf-8, sorted keys)
    | u32 n_buffers | per buffer: u32 name_len, name, u32 ndim,
      ndim x u32 dims, float32 data

Buffers are written in sorted name order so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, VolumeIOError

logger = logging.getLogger(__name__)

MAGIC = b"ARHF"
VERSION = 1


@dataclass
class Checkpoint:
    buffers: dict = field(default_factory=dict)   # name -> float32 array
    meta: dict = field(default_factory=dict)       # iteration, seed, config, optimizer steps

    @property
    def iteration(self):
        return int(self.meta.get("iteration", 0))


def _pack_buffers(buffers):
    chunks = [struct.pack("<I", len(buffers))]
    for name in sorted(buffers):
        array = np.ascontiguousarray(buffers[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def to_bytes(ckpt):
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    header = MAGIC + struct.pack("<II", VERSION, len(meta))
    return header + meta + _pack_buffers(ckpt.buffers)


def from_bytes(raw, source="<bytes>"):
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an ARHF checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable metadata block: {exc}") from exc

    buffers = {}
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        buffers[name] = np.frombuffer(take(n_bytes), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes after the last buffer")
    return Checkpoint(buffers, meta)


def save_checkpoint(ckpt, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise VolumeIOError(f"cannot write checkpoint: {exc.strerror or exc}", path) from exc
    logger.info(f"💾 Checkpoint saved: {path} (iteration {ckpt.iteration})")


def load_checkpoint(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read checkpoint: {exc.strerror or exc}", path) from exc
    return from_bytes(raw, str(path))
