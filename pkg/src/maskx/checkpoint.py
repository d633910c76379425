"""Single-file binary checkpoints.

Layout (little-endian)::

    b"MASKX1" | u32 version | u16 len + config hash | u32 len + config text
    | u32 block count | blocks | u64 step | 32-byte sha256 of everything before

Each block is ``u16 name len | name | u8 ndim | u32 dims... | float32 data``.
Optimizer velocities are stored as blocks named ``opt.<param>``.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MASKX1"
VERSION = 1
OPT_PREFIX = "opt."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_hash: str = ""
    config_text: str = ""

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.step == other.step and self.config_hash == other.config_hash
                and self.config_text == other.config_text
                and _same_blocks(self.params, other.params) and _same_blocks(self.velocity, other.velocity))


def _same_blocks(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(
        a[k].shape == b[k].shape and a[k].astype("<f4").tobytes() == b[k].astype("<f4").tobytes() for k in a)


def _text(buf: io.BytesIO, value: str, width: str) -> None:
    raw = value.encode("utf-8")
    buf.write(struct.pack("<" + width, len(raw)))
    buf.write(raw)


def _block(buf: io.BytesIO, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.float32:
        # stored format is float32; refuse silent precision loss
        if not np.array_equal(array.astype(np.float32), array):
            raise CheckpointError(f"{name}: values not representable in float32")
    _text(buf, name, "H")
    buf.write(struct.pack("<B", array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buf.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _text(buf, ckpt.config_hash, "H")
    _text(buf, ckpt.config_text, "I")
    blocks = sorted(ckpt.params.items()) + sorted((OPT_PREFIX + k, v) for k, v in ckpt.velocity.items())
    buf.write(struct.pack("<I", len(blocks)))
    for name, array in blocks:
        _block(buf, name, array)
    buf.write(struct.pack("<Q", ckpt.step))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def text(self, width: str) -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def loads(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 32:
        raise CheckpointError("checkpoint is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; file is truncated or corrupt")
    config_hash = r.text("H")
    config_text = r.text("I")
    (count,) = r.unpack("I")
    params, velocity = {}, {}
    for _ in range(count):
        name = r.text("H")
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith(OPT_PREFIX):
            velocity[name[len(OPT_PREFIX):]] = array
        else:
            params[name] = array
    (step,) = r.unpack("Q")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint body")
    return Checkpoint(params, velocity, step, config_hash, config_text)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
