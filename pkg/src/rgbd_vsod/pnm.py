"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os

import numpy as np


class PnmFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise PnmFormatError("truncated header")
        out.append(buf[start:i])
    # exactly one whitespace byte separates the header from the raster
    return out, i + 1


def decode(buf: bytes, path: str = "<bytes>") -> np.ndarray:
    """Decode P5/P6 bytes to ``H x W`` or ``H x W x 3`` uint8."""
    try:
        toks, offset = _tokens(buf, 4)
    except PnmFormatError as exc:
        raise PnmFormatError(f"{path}: {exc}") from None
    magic = toks[0]
    if magic not in (b"P5", b"P6"):
        raise PnmFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PnmFormatError(f"{path}: malformed header fields {toks[1:]}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise PnmFormatError(f"{path}: bad dimensions/maxval {w}x{h}/{maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise PnmFormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape((h, w, channels) if channels == 3 else (h, w))
    return arr.copy()


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing image file: {path}")
    with open(path, "rb") as fh:
        return decode(fh.read(), path)


def write(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img))
