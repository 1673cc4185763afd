"""Binary PPM (P6) images, the canonical on-disk format."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float ``[3, H, W]`` in [0, 1] to ``uint8 [H, W, 3]`` (clipped, round-half-even)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32) / 255.0).transpose(2, 0, 1)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] pixels, got shape {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Parse a P6 file with maxval 255; header comments are allowed."""
    fields_: list[bytes] = []
    pos = 0
    while len(fields_) < 4:
        if pos >= len(data):
            raise ValueError("truncated PPM header")
        c = data[pos:pos + 1]
        if c == b"#":
            pos = data.index(b"\n", pos) + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields_.append(data[start:pos])
    magic, w, h, maxval = fields_[0], int(fields_[1]), int(fields_[2]), int(fields_[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"unsupported PPM: magic {magic!r}, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write float ``[3, H, W]`` or ``uint8 [H, W, 3]`` pixels."""
    pixels = image if image.dtype == np.uint8 else to_uint8(image)
    Path(path).write_bytes(encode_ppm(pixels))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def contact_sheet(images: np.ndarray, columns: int = 8, pad: int = 1) -> np.ndarray:
    """Tile float ``[N, 3, H, W]`` images into one ``uint8`` grid with ``columns`` per row."""
    images = np.asarray(images)
    n, _, h, w = images.shape
    rows = max(-(-n // columns), 1)
    sheet = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = to_uint8(images[i])
    return sheet
