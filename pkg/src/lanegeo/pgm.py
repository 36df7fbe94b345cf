"""Binary PGM (P5, 8-bit) read/write."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def encode_pgm(img: np.ndarray) -> bytes:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {a.shape}")
    if a.size and (a.min() < 0 or a.max() > 255):
        raise ValueError("PGM pixel values must lie in 0..255")
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + a.astype(np.uint8).tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())
