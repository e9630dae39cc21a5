"""Letterboxing, YOLOv3 head decoding, IoU and per-class NMS."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ChannelCountMismatch

CONF_THRESHOLD = 0.25
IOU_THRESHOLD = 0.45
PAD_VALUE = 0.5


@dataclass(frozen=True)
class BBox:
    """Center-format box in normalized image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float
    class_name: str = ""

    def to_dict(self) -> dict:
        b = self.bbox
        return {
            "class": self.class_name,
            "confidence": round(float(self.confidence), 6),
            "cx": round(float(b.cx), 6),
            "cy": round(float(b.cy), 6),
            "w": round(float(b.w), 6),
            "h": round(float(b.h), 6),
        }

    @classmethod
    def from_dict(cls, d: dict, names: Sequence[str] | None = None) -> "Detection":
        name = str(d["class"])
        class_id = names.index(name) if names and name in names else int(d.get("class_id", -1))
        return cls(BBox(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])),
                   class_id, float(d["confidence"]), name)


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    orig_w: int
    orig_h: int
    net_w: int
    net_h: int

    @property
    def new_w(self) -> int:
        return _scaled(self.orig_w, self.scale, self.net_w)

    @property
    def new_h(self) -> int:
        return _scaled(self.orig_h, self.scale, self.net_h)


def load_names(path) -> list[str]:
    """Darknet ``.names``: one class per line, index = line number."""
    with open(path, encoding="utf-8") as fh:
        names = [line.rstrip("\r\n") for line in fh]
    while names and not names[-1].strip():
        names.pop()
    return [n.strip() for n in names]


# ------------------------------------------------------------ letterbox


def _scaled(size: int, scale: float, limit: int) -> int:
    return max(1, min(limit, int(round(size * scale))))


def letterbox_transform(orig_w: int, orig_h: int, net_w: int, net_h: int) -> LetterboxTransform:
    if min(orig_w, orig_h, net_w, net_h) < 1:
        raise ValueError("image and network dimensions must be >= 1")
    scale = min(net_w / orig_w, net_h / orig_h)
    new_w = _scaled(orig_w, scale, net_w)
    new_h = _scaled(orig_h, scale, net_h)
    return LetterboxTransform(scale, (net_w - new_w) // 2, (net_h - new_h) // 2, orig_w, orig_h, net_w, net_h)


def resize_bilinear(img: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (h, w, c) float image."""
    h, w = img.shape[:2]
    if (h, w) == (new_h, new_w):
        return img.astype(np.float32, copy=True)
    ys = np.linspace(0, h - 1, new_h) if new_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, new_w) if new_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = img.astype(np.float32)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def letterbox(image: np.ndarray, net_size: tuple[int, int]) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize onto a gray canvas.

    ``image`` is (h, w, 3) RGB, uint8 in [0, 255] or float in [0, 1].
    Returns a (3, net_h, net_w) float32 tensor and the transform used.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    net_w, net_h = net_size
    t = letterbox_transform(img.shape[1], img.shape[0], net_w, net_h)
    resized = resize_bilinear(img[:, :, :3], t.new_w, t.new_h)
    canvas = np.full((3, net_h, net_w), PAD_VALUE, np.float32)
    canvas[:, t.pad_y:t.pad_y + t.new_h, t.pad_x:t.pad_x + t.new_w] = resized.transpose(2, 0, 1)
    return canvas, t


def unletterbox(detections: Sequence[Detection], t: LetterboxTransform) -> list[Detection]:
    """Map net-frame detections back to normalized original-image coordinates."""
    sx = t.scale * t.orig_w
    sy = t.scale * t.orig_h
    out = []
    for d in detections:
        b = d.bbox
        cx = (b.cx * t.net_w - t.pad_x) / sx
        cy = (b.cy * t.net_h - t.pad_y) / sy
        w = b.w * t.net_w / sx
        h = b.h * t.net_h / sy
        x0, y0 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
        x1, y1 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
        out.append(replace(d, bbox=BBox.from_corners(x0, y0, max(x0, x1), max(y0, y1))))
    return out


# -------------------------------------------------------------- decoding


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_head(head: np.ndarray, anchors: Sequence[tuple[float, float]], net_size: tuple[int, int],
                num_classes: int, conf_threshold: float = CONF_THRESHOLD,
                names: Sequence[str] | None = None) -> list[Detection]:
    """Decode one raw yolo feature map into thresholded detections.

    Channel layout per anchor: tx, ty, tw, th, objectness, class scores.
    Each (cell, anchor) yields at most one detection, for its best class.
    """
    head = np.asarray(head, dtype=np.float64)
    n_anchor = len(anchors)
    stride = num_classes + 5
    if head.ndim != 3 or head.shape[0] != n_anchor * stride:
        raise ChannelCountMismatch(
            f"head has {head.shape[0] if head.ndim == 3 else head.shape} channels, "
            f"expected {n_anchor} x ({num_classes} + 5)"
        )
    net_w, net_h = net_size
    _, gh, gw = head.shape
    p = head.reshape(n_anchor, stride, gh, gw)
    with np.errstate(over="ignore"):
        obj = _sigmoid(p[:, 4])
        cls_logit = p[:, 5:]
        best = cls_logit.argmax(axis=1)
        cls_prob = _sigmoid(np.take_along_axis(cls_logit, best[:, None], axis=1)[:, 0])
        conf = obj * cls_prob
    # (row, col, anchor) order
    hits = np.argwhere(conf.transpose(1, 2, 0) >= conf_threshold)
    dets = []
    for row, col, a in hits:
        tx, ty, tw, th = p[a, 0:4, row, col]
        pw, ph = anchors[a]
        with np.errstate(over="ignore"):
            bw = pw * np.exp(tw) / net_w
            bh = ph * np.exp(th) / net_h
        cid = int(best[a, row, col])
        dets.append(Detection(
            BBox(float((_sigmoid(tx) + col) / gw), float((_sigmoid(ty) + row) / gh), float(bw), float(bh)),
            cid,
            float(conf[a, row, col]),
            names[cid] if names and cid < len(names) else str(cid),
        ))
    return dets


# ------------------------------------------------------------------ NMS


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _iou_matrix(boxes: np.ndarray) -> np.ndarray:
    x0 = boxes[:, 0] - boxes[:, 2] / 2
    y0 = boxes[:, 1] - boxes[:, 3] / 2
    x1 = boxes[:, 0] + boxes[:, 2] / 2
    y1 = boxes[:, 1] + boxes[:, 3] / 2
    iw = np.minimum(x1[:, None], x1[None]) - np.maximum(x0[:, None], x0[None])
    ih = np.minimum(y1[:, None], y1[None]) - np.maximum(y0[:, None], y0[None])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area = boxes[:, 2] * boxes[:, 3]
    union = area[:, None] + area[None] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(detections: Sequence[Detection], iou_threshold: float = IOU_THRESHOLD) -> list[Detection]:
    """Greedy per-class suppression; survivors keep confidence order.

    Ties in confidence go to the lower input index.
    """
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    boxes = np.array([[d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h] for d in detections])
    classes = np.array([d.class_id for d in detections])
    overlap = _iou_matrix(boxes) > iou_threshold
    overlap &= classes[:, None] == classes[None]
    suppressed = np.zeros(len(detections), bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= overlap[i]
    return [detections[i] for i in keep]
