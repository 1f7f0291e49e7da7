"""Binary PGM (P5, maxval 255) reading and writing for 8-bit grids."""
from __future__ import annotations

import os

import numpy as np

from .errors import FormatError


def quantize(values):
    """Map probabilities in [0, 1] to the 8-bit codes stored on disk."""
    return np.clip(np.rint(np.asarray(values, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values, *, raw=False):
    """Write a grid as P5. ``raw=True`` stores the values as integer codes."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2-D grid, got shape {arr.shape}")
    codes = arr.astype(np.uint8) if raw else quantize(arr)
    h, w = codes.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(codes.tobytes())
    os.replace(tmp, path)


def _tokens(buf):
    """Yield header tokens and their end offsets, skipping comments."""
    i, n = 0, len(buf)
    while i < n:
        ch = buf[i:i + 1]
        if ch == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            yield buf[i:j], j
            i = j


def read_pgm(path, *, raw=False):
    """Read a P5 file; returns probabilities v/255, or the codes when ``raw``."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    toks = _tokens(buf)
    try:
        magic, _ = next(toks)
        w, _ = next(toks)
        h, _ = next(toks)
        maxval, end = next(toks)
        w, h, maxval = int(w), int(h), int(maxval)
    except (StopIteration, ValueError) as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if magic != b"P5":
        raise FormatError(f"{path}: expected P5 magic, got {magic!r}")
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = buf[end + 1:]
    if len(data) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    codes = np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
    return codes if raw else codes.astype(np.float64) / 255.0
