"""Binary PPM (P6, 8-bit) images.

Pixel values are stored linearly: a float ``v`` in [0, 1] becomes
``round(255 v)``; no sRGB transfer curve is applied in either direction.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def to_uint8(image) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Write an (H, W, 3) float image in [0, 1]; values outside are clamped."""
    img = to_uint8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past the last one."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:i])
    return tokens, i


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an (H, W, 3) float array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, offset = _tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if w < 1 or h < 1 or maxval != 255:
        raise ImageFormatError(f"{path}: unsupported size or depth ({w}x{h}, maxval {maxval})")
    offset += 1  # single whitespace byte ends the header
    payload = data[offset:offset + 3 * w * h]
    if len(payload) < 3 * w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).astype(float) / 255.0


def overlay(rendered, observed, alpha: float = 0.5) -> np.ndarray:
    """Render blended over a grayscale copy of the observation."""
    obs = np.asarray(observed, dtype=float)
    gray = obs @ np.array([0.299, 0.587, 0.114])
    return np.clip((1.0 - alpha) * gray[..., None] + alpha * np.asarray(rendered, dtype=float), 0.0, 1.0)
