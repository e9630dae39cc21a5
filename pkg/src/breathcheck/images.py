"""Image decoding/encoding boundary (JPEG and PNG only)."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

FORMATS = ("JPEG", "PNG")


def _open(source) -> Image.Image:
    if isinstance(source, (bytes, bytearray)):
        img = Image.open(io.BytesIO(source))
    else:
        img = Image.open(Path(source))
    if img.format not in FORMATS:
        raise ValueError(f"unsupported image format {img.format!r}; JPEG and PNG only")
    return img


def decode_image(source) -> np.ndarray:
    """(h, w, 3) uint8 RGB array from a path or encoded bytes."""
    with _open(source) as img:
        return np.asarray(img.convert("RGB"))


def encode_jpeg(rgb: np.ndarray, quality: int = 90) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(buf, "JPEG", quality=quality)
    return buf.getvalue()


def jpeg_bytes(path) -> bytes:
    """The file's bytes if it is already a JPEG, else a JPEG re-encode."""
    data = Path(path).read_bytes()
    with _open(data) as img:
        if img.format == "JPEG":
            return data
        return encode_jpeg(np.asarray(img.convert("RGB")))


def draw_detections(rgb: np.ndarray, detections) -> Image.Image:
    """Burn boxes and labels into a copy of ``rgb``."""
    img = Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    w, h = img.size
    for d in detections:
        x0, y0, x1, y1 = d.bbox.corners
        box = (x0 * w, y0 * h, x1 * w, y1 * h)
        draw.rectangle(box, outline=(255, 0, 0), width=2)
        draw.text((box[0] + 2, box[1] + 2), f"{d.class_name} {d.confidence:.2f}", fill=(255, 255, 0))
    return img
