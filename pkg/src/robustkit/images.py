"""Binary PGM/PPM image dumps for [0, 1]-scaled tensors.

Grayscale (C=1) images go to P5 PGM, color (C=3) to P6 PPM, both 8-bit with
pixels denormalized as round(255 * v).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ParseError


def to_bytes(image: np.ndarray) -> bytes:
    """Encode one C x H x W image in [0, 1] as PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ConfigError(f"expected C x H x W with C in {{1, 3}}, got shape {image.shape}")
    c, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        return header + pixels[0].tobytes()
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + pixels.transpose(1, 2, 0).tobytes()  # interleave RGB


def write_image(image: np.ndarray, path: str):
    with open(path, "wb") as f:
        f.write(to_bytes(image))


def read_image(path: str) -> np.ndarray:
    """Decode a binary PGM/PPM written by this module back to C x H x W in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] not in (b"P5", b"P6"):
        raise ParseError(f"{path}: not a binary PGM/PPM produced by this module")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ParseError(f"{path}: malformed PGM/PPM header") from None
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    c = 1 if parts[0] == b"P5" else 3
    expected = w * h * c
    if len(parts[3]) != expected:
        raise ParseError(f"{path}: expected {expected} pixel bytes, got {len(parts[3])}")
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if c == 1:
        out = pixels.reshape(1, h, w)
    else:
        out = pixels.reshape(h, w, 3).transpose(2, 0, 1)
    return out.astype(np.float32) / 255.0
