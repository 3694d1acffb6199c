"""Tensor (``.ten``) and checkpoint (``LCAM``) files.

``.ten``: ``b"LCAT"``, u32 rank, ``rank`` u32 extents, then float32 values in
row-major order. All integers and floats are little-endian.

Checkpoint: ``b"LCAM"``, u32 parameter count, then for every parameter a u16
name length, the UTF-8 name and a complete ``.ten`` payload.
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

TEN_MAGIC = b"LCAT"
CKPT_MAGIC = b"LCAM"
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def tensor_bytes(array) -> bytes:
    a = np.asarray(array)
    if a.ndim > 4:
        raise ValueError(f"tensors have rank <= 4, got {a.ndim}")
    header = TEN_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype=_F32).tobytes()


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def read_tensor_from(fh) -> np.ndarray:
    magic = _read_exact(fh, 4, "tensor magic")
    if magic != TEN_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TEN_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
    if rank > 4:
        raise FormatError(f"tensor rank {rank} exceeds 4")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor extents"))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 4 * count, "tensor payload")
    return np.frombuffer(payload, dtype=_F32).astype(np.float32).reshape(shape)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        out = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError(f"{os.fspath(path)}: trailing bytes after tensor payload")
    return out


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<I", len(state)))
    for name, array in state.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(tensor_bytes(array))
    return out.getvalue()


def read_checkpoint_from(fh) -> dict[str, np.ndarray]:
    magic = _read_exact(fh, 4, "checkpoint magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, n, "parameter name").decode("utf-8")
        if name in state:
            raise FormatError(f"duplicate parameter {name!r} in checkpoint")
        state[name] = read_tensor_from(fh)
    return state


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash mid-write never leaves a torn checkpoint."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(state))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        state = read_checkpoint_from(fh)
        if fh.read(1):
            raise FormatError(f"{os.fspath(path)}: trailing bytes after checkpoint")
    return state
