"""Binary checkpoint of named float32 tensors.

Layout (all integers little-endian)::

    b"ARMPS1\\n"                       magic, 7 bytes
    u32 version
    u32 n, n bytes                     config snapshot (UTF-8 key=value text)
    u32 count
    count x {
        u16 n, n bytes                 tensor name (UTF-8)
        u8 ndim, ndim x u32            shape
        prod(shape) x f32              values, C order
    }
    8 bytes                            blake2b-64 digest of everything above

Model parameters come first in registration order, followed by buffers
(batch-norm running statistics, the OIM lookup table).
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ContractError

MAGIC = b"ARMPS1\n"
VERSION = 1
DIGEST_SIZE = 8


class CheckpointError(ContractError):
    """Checkpoint is structurally unusable for the requested model."""


class ChecksumError(CheckpointError):
    """Stored digest does not match the content: the file is corrupt."""


@dataclass
class Checkpoint:
    version: int
    config_text: str
    tensors: dict[str, np.ndarray]

    @property
    def checksum(self) -> str:
        return digest(encode(self.tensors, self.config_text, self.version)[:-DIGEST_SIZE])


def digest(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).hexdigest()


def model_state(model) -> list[tuple[str, np.ndarray]]:
    state = [(name, p.data) for name, p in model.named_parameters()]
    state += list(model.named_buffers())
    names = [n for n, _ in state]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names in model state")
    return state


def encode(tensors, config_text: str, version: int = VERSION) -> bytes:
    items = tensors.items() if isinstance(tensors, dict) else tensors
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(cfg)), cfg]
    items = list(items)
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=DIGEST_SIZE).digest()


def decode(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + DIGEST_SIZE:
        raise ChecksumError("checkpoint truncated")
    body, stored = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.blake2b(body, digest_size=DIGEST_SIZE).digest() != stored:
        raise ChecksumError("checkpoint checksum mismatch: file is corrupt")
    if not body.startswith(MAGIC):
        raise CheckpointError("not an ARMPS1 checkpoint")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def take_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint truncated")
        out = body[pos:pos + n]
        pos += n
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    config_text = take_bytes(n).decode("utf-8")
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<H")
        name = take_bytes(n).decode("utf-8")
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take_bytes(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
        tensors[name] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return Checkpoint(version, config_text, tensors)


def save(path: str | Path, model, config_text: str) -> str:
    """Write ``model`` to ``path`` atomically; returns the hex checksum."""
    data = encode(model_state(model), config_text)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return data[-DIGEST_SIZE:].hex()


def load(path: str | Path) -> Checkpoint:
    try:
        return decode(Path(path).read_bytes())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def restore(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model`` in place. Every model tensor
    must be present with a matching shape; mismatches name the tensor."""
    state = model_state(model)
    expected = {name for name, _ in state}
    missing = [n for n, _ in state if n not in ckpt.tensors]
    extra = sorted(set(ckpt.tensors) - expected)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    for name, target in state:
        src = ckpt.tensors[name]
        if src.shape != target.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {src.shape}, model {target.shape}")
    for name, target in state:
        np.copyto(target, ckpt.tensors[name])
