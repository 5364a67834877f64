"""Plain (P2) and raw (P5) PGM reading; writing is always P2."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from diffcd.errors import LoadError


def write_pgm(path, pixels: np.ndarray, maxval: int = 255) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ValueError(f"pixel values outside 0..{maxval}")
    h, w = arr.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in arr]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _tokens(data: bytes):
    """Header tokens with ``#`` comments stripped; yields (token, end offset)."""
    pos = 0
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and not data[pos:pos + 1].isspace():
                pos += 1
            yield data[start:pos], pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return ``(pixels, maxval)`` with pixels as an int64 (H, W) array."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    toks = _tokens(data)
    try:
        magic, _ = next(toks)
        if magic not in (b"P2", b"P5"):
            raise LoadError(f"{path}: not a PGM file (magic {magic!r})")
        w = int(next(toks)[0])
        h = int(next(toks)[0])
        maxval_tok, end = next(toks)
        maxval = int(maxval_tok)
        if w <= 0 or h <= 0 or not 0 < maxval < 65536:
            raise LoadError(f"{path}: bad PGM header {w}x{h} max {maxval}")
        if magic == b"P2":
            values = [int(next(toks)[0]) for _ in range(w * h)]
            pixels = np.array(values, dtype=np.int64)
        else:
            dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
            raw = data[end + 1 :]
            pixels = np.frombuffer(raw, dtype=dtype, count=w * h).astype(np.int64)
    except StopIteration:
        raise LoadError(f"{path}: truncated PGM") from None
    except ValueError as exc:
        raise LoadError(f"{path}: malformed PGM ({exc})") from exc
    if pixels.max(initial=0) > maxval:
        raise LoadError(f"{path}: pixel exceeds maxval {maxval}")
    return pixels.reshape(h, w), maxval


def to_pixels(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to 0..255 by affine rounding."""
    return np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.int64)


def from_pixels(pixels: np.ndarray, maxval: int = 255) -> np.ndarray:
    return pixels.astype(np.float64) / maxval * 2.0 - 1.0


def prob_to_pixels(prob: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.int64)
