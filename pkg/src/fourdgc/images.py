"""Binary PPM (P6, 8-bit) image I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    data = to_bytes8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("PPM images must be (H, W, 3)")
    h, w, _ = data.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def _tokens(data: bytes, count: int):
    pos = 0
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(data[start:pos])
    return out, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P6":
        raise ValueError("not a binary PPM (P6)")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
