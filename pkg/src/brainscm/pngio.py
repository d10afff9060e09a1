"""Deterministic PNG encoding shared by the CLI and the HTTP service.

Intensity images use a fixed display clip so identical arrays always produce
identical bytes; difference images are signed, centered at 128, with a fixed
±0.5 intensity scale for comparability across interventions.
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

DISPLAY_CLIP = 2.0
DIFF_SCALE = 0.5


def encode_intensity_png(image: np.ndarray, clip: float = DISPLAY_CLIP) -> bytes:
    arr = np.clip(np.asarray(image, dtype=np.float64) / clip, 0.0, 1.0)
    quantized = np.round(arr * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(quantized, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_intensity_png(data: bytes, clip: float = DISPLAY_CLIP) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)), dtype=np.float64) / 255.0
    return (arr * clip).astype(np.float32)


def encode_diff_png(diff: np.ndarray, scale: float = DIFF_SCALE) -> bytes:
    arr = np.clip(np.asarray(diff, dtype=np.float64) / scale, -1.0, 1.0)
    quantized = np.round(arr * 127.5 + 127.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(quantized, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def to_base64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def from_base64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


def thumbnail_png(image: np.ndarray, size: int = 64,
                  clip: float = DISPLAY_CLIP) -> bytes:
    arr = np.clip(np.asarray(image, dtype=np.float64) / clip, 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L")
    img = img.resize((size, size), Image.BILINEAR)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
