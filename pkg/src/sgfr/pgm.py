"""Minimal binary PGM (P5) reader/writer for masks and score-map previews.

8-bit files carry boolean masks (0 / 255); 16-bit files carry score maps
rescaled to the full range for visual inspection.  Multi-byte samples are
big-endian per the format.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm8(values: np.ndarray, path: str | Path) -> None:
    a = np.asarray(values)
    if a.dtype == bool:
        a = np.where(a, 255, 0)
    a = a.astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + a.tobytes())


def write_pgm16(scores: np.ndarray, path: str | Path) -> None:
    """Scale nonnegative scores onto [0, 65535] and write 16-bit P5."""
    a = np.asarray(scores, dtype=np.float64)
    peak = float(a.max())
    scaled = np.zeros_like(a) if peak <= 0 else a / peak * 65535.0
    u16 = scaled.round().astype(">u2")
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode()
    Path(path).write_bytes(header + u16.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = raw[pos + 1 :]
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    a = np.frombuffer(data, dtype=dtype, count=width * height)
    return a.reshape(height, width).astype(np.uint16)
