import struct

import numpy as np
import pytest

from arhnet.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from arhnet.errors import CheckpointError, VolumeIOError


def sample_checkpoint(rng):
    buffers = {
        "G.enc0.conv1.weight": rng.standard_normal((4, 2, 3, 3, 3)).astype(np.float32),
        "G.enc0.conv1.bias": np.zeros(4, dtype=np.float32),
        "opt_g.m.enc0.conv1.bias": rng.standard_normal(4).astype(np.float32),
    }
    return Checkpoint(buffers, {"iteration": 42, "seed": 3, "config": {"lr_g": 1e-4}})


def test_save_load_save_is_byte_identical(tmp_path, rng):
    ckpt = sample_checkpoint(rng)
    save_checkpoint(ckpt, tmp_path / "a.arhf")
    loaded = load_checkpoint(tmp_path / "a.arhf")
    save_checkpoint(loaded, tmp_path / "b.arhf")
    assert (tmp_path / "a.arhf").read_bytes() == (tmp_path / "b.arhf").read_bytes()
    assert loaded.iteration == 42
    for name, array in ckpt.buffers.items():
        assert loaded.buffers[name].tobytes() == array.tobytes()


def test_buffer_order_does_not_change_bytes(rng):
    ckpt = sample_checkpoint(rng)
    reordered = Checkpoint(dict(reversed(list(ckpt.buffers.items()))), ckpt.meta)
    assert to_bytes(ckpt) == to_bytes(reordered)


def test_corrupt_magic(rng):
    raw = bytearray(to_bytes(sample_checkpoint(rng)))
    raw[:4] = b"XXXX"
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(bytes(raw))


def test_version_mismatch(rng):
    raw = bytearray(to_bytes(sample_checkpoint(rng)))
    struct.pack_into("<I", raw, 4, 2)
    with pytest.raises(CheckpointError, match="version 2"):
        from_bytes(bytes(raw))


def test_truncated_and_trailing_bytes(rng):
    raw = to_bytes(sample_checkpoint(rng))
    with pytest.raises(CheckpointError):
        from_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        from_bytes(raw + b"\x00")


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(VolumeIOError):
        load_checkpoint(tmp_path / "nope.arhf")
