"""Pascal/VOC (LabelImg) to Darknet label conversion, splitting and manifests."""

from __future__ import annotations

import math
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import (
    EmptyDataset,
    EmptyObjectName,
    InvalidBox,
    IoFailure,
    MalformedXml,
    MissingSize,
    UnknownClass,
)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


@dataclass(frozen=True)
class VocObject:
    name: str
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    difficult: bool = False
    truncated: bool = False


@dataclass
class VocAnnotation:
    width: int
    height: int
    depth: int = 3
    objects: list[VocObject] = field(default_factory=list)
    filename: str = ""


@dataclass(frozen=True)
class YoloLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def format(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"

    def to_corners(self, width: int, height: int) -> tuple[float, float, float, float]:
        """Inverse of :func:`voc_to_yolo` for one box, in pixels."""
        return (
            (self.cx - self.w / 2) * width,
            (self.cy - self.h / 2) * height,
            (self.cx + self.w / 2) * width,
            (self.cy + self.h / 2) * height,
        )


def _text(node, path: str) -> str | None:
    found = node.find(path)
    if found is None or found.text is None:
        return None
    return found.text.strip()


def _number(node, path: str) -> float:
    raw = _text(node, path)
    if raw is None:
        raise InvalidBox(f"missing <{path}>")
    try:
        return float(raw)
    except ValueError:
        raise InvalidBox(f"<{path}> is not a number: {raw!r}") from None


def parse_voc(xml: str | bytes) -> VocAnnotation:
    """Parse one LabelImg-style annotation document.

    Pixel coordinates are read as 0-based; boxes are clamped to the image
    after the ``max > min`` check, which is never silently repaired.
    """
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc), exc.position[0]) from None
    size = root.find("size")
    if size is None or _text(size, "width") is None or _text(size, "height") is None:
        raise MissingSize("annotation has no size/width and size/height")
    try:
        width = int(float(_text(size, "width")))
        height = int(float(_text(size, "height")))
        depth = int(float(_text(size, "depth") or 3))
    except ValueError:
        raise MissingSize("size fields are not numbers") from None
    if width < 1 or height < 1:
        raise MissingSize(f"non-positive image size {width}x{height}")

    ann = VocAnnotation(width, height, depth, filename=_text(root, "filename") or "")
    for obj in root.findall("object"):
        name = _text(obj, "name")
        if not name:
            raise EmptyObjectName("object without a name")
        box = obj.find("bndbox")
        if box is None:
            raise InvalidBox(f"object {name!r} has no bndbox")
        x0, y0 = _number(box, "xmin"), _number(box, "ymin")
        x1, y1 = _number(box, "xmax"), _number(box, "ymax")
        if x1 <= x0 or y1 <= y0:
            raise InvalidBox(f"object {name!r}: degenerate box ({x0},{y0})-({x1},{y1})")
        x0, x1 = max(0.0, x0), min(float(width), x1)
        y0, y1 = max(0.0, y0), min(float(height), y1)
        if x1 <= x0 or y1 <= y0:
            raise InvalidBox(f"object {name!r}: box lies outside the image")
        ann.objects.append(VocObject(
            name, x0, y0, x1, y1,
            difficult=_text(obj, "difficult") == "1",
            truncated=_text(obj, "truncated") == "1",
        ))
    return ann


def voc_to_yolo(ann: VocAnnotation, names: Sequence[str], names_path: str | None = None) -> list[YoloLabel]:
    labels = []
    for obj in ann.objects:
        if obj.name not in names:
            raise UnknownClass(obj.name, names_path)
        labels.append(YoloLabel(
            list(names).index(obj.name),
            (obj.xmin + obj.xmax) / 2 / ann.width,
            (obj.ymin + obj.ymax) / 2 / ann.height,
            (obj.xmax - obj.xmin) / ann.width,
            (obj.ymax - obj.ymin) / ann.height,
        ))
    return labels


def format_labels(labels: Sequence[YoloLabel]) -> str:
    return "".join(label.format() + "\n" for label in labels)


def parse_labels(text: str) -> list[YoloLabel]:
    out = []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        out.append(YoloLabel(int(parts[0]), *(float(p) for p in parts[1:5])))
    return out


def split_dataset(items: Sequence[str], train_fraction: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Seeded shuffle, then the first ``round(fraction * N)`` items train."""
    if not items:
        raise EmptyDataset("nothing to split")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    shuffled = list(items)
    random.Random(seed).shuffle(shuffled)
    n_train = math.floor(train_fraction * len(shuffled) + 0.5)
    return shuffled[:n_train], shuffled[n_train:]


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(path, exc.strerror or str(exc)) from None


def write_manifests(train: Sequence[str], test: Sequence[str], names: Sequence[str], output_dir,
                    labels: dict[str, Sequence[YoloLabel]] | None = None) -> list[Path]:
    """Emit Darknet training manifests into ``output_dir``.

    Writes ``train.txt``, ``test.txt``, ``obj.names``, ``obj.data`` and, for
    each entry of ``labels``, ``<image basename>.txt``.  Returns the paths
    written, in write order.
    """
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(out, exc.strerror or str(exc)) from None
    written = []

    def emit(name: str, text: str) -> None:
        path = out / name
        _write(path, text)
        written.append(path)

    emit("train.txt", "".join(f"{p}\n" for p in train))
    emit("test.txt", "".join(f"{p}\n" for p in test))
    emit("obj.names", "".join(f"{n}\n" for n in names))
    emit("obj.data", (
        f"classes = {len(names)}\n"
        f"train = {out / 'train.txt'}\n"
        f"valid = {out / 'test.txt'}\n"
        f"names = {out / 'obj.names'}\n"
        f"backup = backup/\n"
    ))
    for image in sorted(labels or {}):
        emit(Path(image).stem + ".txt", format_labels(labels[image]))
    return written


def parse_data_file(text: str) -> dict[str, str]:
    entries = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def find_image_for(xml_path: Path, ann: VocAnnotation) -> Path:
    """Best guess at the image an annotation describes (same stem, or its filename)."""
    for suffix in IMAGE_SUFFIXES:
        candidate = xml_path.with_suffix(suffix)
        if candidate.exists():
            return candidate
    if ann.filename:
        return xml_path.parent / ann.filename
    return xml_path.with_suffix(".jpg")
