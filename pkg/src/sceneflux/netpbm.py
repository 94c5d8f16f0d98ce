"""Binary netpbm readers and writers (P5 grayscale, P6 color, P4 bitmaps).

All pixel payloads are binary; 16-bit samples are big-endian per the
netpbm convention.
"""
from __future__ import annotations

import numpy as np

from .errors import ParseError


def _read_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Return `count` header integers and the offset just past them."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ParseError("truncated netpbm header")
        c = data[i : i + 1]
        if c == b"#":
            j = data.find(b"\n", i)
            i = len(data) if j < 0 else j + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            try:
                tokens.append(int(data[i:j]))
            except ValueError as exc:
                raise ParseError(f"bad netpbm header token {data[i:j]!r}") from exc
            i = j
    # exactly one whitespace byte separates header from payload
    return tokens, i + 1


def _payload(data: bytes, offset: int, dtype, count: int, path) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    if len(data) - offset < count * itemsize:
        raise ParseError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) into float64 intensities in [0, 1]."""
    data = open(path, "rb").read()
    if not data.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM (P5)")
    (width, height, maxval), offset = _read_tokens(data[2:], 3)
    offset += 2
    if maxval <= 0 or maxval > 65535:
        raise ParseError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else np.uint8
    raw = _payload(data, offset, dtype, width * height, path)
    return raw.reshape(height, width).astype(np.float64) / maxval


def read_pgm_raw(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM returning integer samples and the maxval."""
    data = open(path, "rb").read()
    if not data.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM (P5)")
    (width, height, maxval), offset = _read_tokens(data[2:], 3)
    offset += 2
    dtype = ">u2" if maxval > 255 else np.uint8
    raw = _payload(data, offset, dtype, width * height, path)
    return raw.reshape(height, width).astype(np.int64), maxval


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write [0, 1] intensities as binary PGM with maxval 255 or 65535."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * maxval)
    payload = q.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(payload)


def write_pgm_raw(path, samples: np.ndarray, maxval: int) -> None:
    """Write integer samples (already in [0, maxval]) as binary PGM."""
    s = np.asarray(samples)
    payload = s.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    h, w = s.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(payload)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) float [0, 1] array as binary PPM, maxval 255."""
    img = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * 255).astype(np.uint8)
    h, w, _ = q.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into an (h, w, 3) float64 array in [0, 1]."""
    data = open(path, "rb").read()
    if not data.startswith(b"P6"):
        raise ParseError(f"{path}: not a binary PPM (P6)")
    (width, height, maxval), offset = _read_tokens(data[2:], 3)
    offset += 2
    dtype = ">u2" if maxval > 255 else np.uint8
    raw = _payload(data, offset, dtype, width * height * 3, path)
    return raw.reshape(height, width, 3).astype(np.float64) / maxval


def write_pbm(path, bits: np.ndarray) -> None:
    """Write a boolean mask as binary PBM (P4); 1 bits are foreground."""
    mask = np.asarray(bits).astype(bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as f:
        f.write(f"P4\n{w} {h}\n".encode())
        f.write(packed.tobytes())


def read_pbm(path) -> np.ndarray:
    """Read a binary PBM (P4) into a boolean mask."""
    data = open(path, "rb").read()
    if not data.startswith(b"P4"):
        raise ParseError(f"{path}: not a binary PBM (P4)")
    (width, height), offset = _read_tokens(data[2:], 2)
    offset += 2
    row_bytes = (width + 7) // 8
    raw = np.frombuffer(data, dtype=np.uint8, count=row_bytes * height, offset=offset)
    if raw.size != row_bytes * height:
        raise ParseError(f"{path}: truncated bitmap data")
    bits = np.unpackbits(raw.reshape(height, row_bytes), axis=1)[:, :width]
    return bits.astype(bool)
