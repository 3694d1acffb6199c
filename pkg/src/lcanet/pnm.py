"""Binary PPM (P6) and PGM (P5) images with 8-bit samples."""
from __future__ import annotations

import os

import numpy as np


class PnmError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} at byte offset {offset}")
        self.offset = offset


def _to_bytes(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("cannot encode non-finite pixel values")
    return np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode(values: np.ndarray) -> bytes:
    """Encode ``H x W`` (PGM) or ``3 x H x W`` (PPM) values in [0, 1]."""
    v = np.asarray(values)
    if v.ndim == 2:
        magic, pixels = b"P5", _to_bytes(v)
    elif v.ndim == 3 and v.shape[0] == 3:
        magic, pixels = b"P6", _to_bytes(v.transpose(1, 2, 0))
    else:
        raise ValueError(f"expected H x W or 3 x H x W values, got shape {v.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write(path, values: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(values))


def _header_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmError("unexpected end of header", start, path)
    return buf[start:pos], pos


def decode(buf: bytes, path=None) -> np.ndarray:
    """Inverse of :func:`encode`; returns float32 values scaled to [0, 1]."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PnmError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0, path)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        token, pos = _header_token(buf, pos, path)
        offset = pos - len(token)
        if not token.isdigit():
            raise PnmError(f"{label} is not a decimal integer ({token[:16]!r})", offset, path)
        fields.append(int(token))
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise PnmError(f"empty image {w}x{h}", 2, path)
    if maxval != 255:
        raise PnmError(f"only maxval 255 is supported, got {maxval}", pos, path)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError("missing whitespace after header", pos, path)
    pos += 1
    need = w * h * channels
    have = len(buf) - pos
    if have < need:
        raise PnmError(f"truncated pixel data: need {need} bytes, found {have}", len(buf), path)
    if have > need:
        raise PnmError(f"{have - need} trailing bytes after pixel data", pos + need, path)
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    values = pixels.astype(np.float32) / np.float32(255.0)
    if channels == 1:
        return values.reshape(h, w)
    return values.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), os.fspath(path))
