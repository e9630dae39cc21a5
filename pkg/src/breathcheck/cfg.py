"""Darknet ``.cfg`` parsing, validation, shape inference and rewriting.

The dialect: ``[section]`` headers, ``key=value`` lines, ``#``/``;`` comments,
blank lines ignored.  Only the seven section kinds used by YOLOv3 and
YOLOv3-tiny are accepted.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Iterable

from .errors import (
    DanglingReference,
    DuplicateNetSection,
    IndexOutOfRange,
    InvalidParameter,
    MalformedLine,
    MissingNetSection,
    NonPositiveShape,
    ShapeMismatch,
    UnknownSection,
    UnsupportedFeature,
    YoloWithoutHeadConv,
)

log = logging.getLogger(__name__)

KINDS = ("net", "convolutional", "maxpool", "route", "shortcut", "upsample", "yolo")

_KNOWN_KEYS = {
    "net": {
        "batch", "subdivisions", "width", "height", "channels", "momentum", "decay",
        "angle", "saturation", "exposure", "hue", "learning_rate", "burn_in",
        "max_batches", "policy", "steps", "scales",
    },
    "convolutional": {"batch_normalize", "filters", "size", "stride", "pad", "padding", "activation"},
    "maxpool": {"size", "stride", "padding"},
    "route": {"layers"},
    "shortcut": {"from", "activation"},
    "upsample": {"stride"},
    "yolo": {"mask", "anchors", "classes", "num", "jitter", "ignore_thresh", "truth_thresh", "random"},
}
_ANY_LAYER_KEYS = {"stopbackward"}

Shape = tuple[int, int, int]


@dataclass
class LayerSpec:
    kind: str
    params: dict[str, str] = field(default_factory=dict)
    source_line: int = field(default=0, compare=False)

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.params.get(key, default)

    def get_int(self, key: str, default: int | None = None, *, index: int = -1) -> int:
        raw = self.params.get(key)
        if raw is None:
            if default is None:
                raise InvalidParameter(index, key, "<missing>", self.source_line)
            return default
        try:
            return int(raw)
        except ValueError:
            raise InvalidParameter(index, key, raw, self.source_line) from None

    def get_ints(self, key: str, *, index: int = -1) -> list[int]:
        raw = self.params.get(key, "")
        try:
            return [int(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise InvalidParameter(index, key, raw, self.source_line) from None

    @property
    def batch_normalize(self) -> bool:
        return self.params.get("batch_normalize", "0").strip() == "1"

    @property
    def activation(self) -> str:
        return self.params.get("activation", "logistic" if self.kind == "yolo" else "linear")


@dataclass
class NetworkConfig:
    net: LayerSpec
    layers: list[LayerSpec] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list, compare=False)

    @property
    def width(self) -> int:
        return self.net.get_int("width", 416)

    @property
    def height(self) -> int:
        return self.net.get_int("height", 416)

    @property
    def channels(self) -> int:
        return self.net.get_int("channels", 3)

    @property
    def input_shape(self) -> Shape:
        return (self.channels, self.height, self.width)

    def indices(self, kind: str) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == kind]

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for layer in self.layers:
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
        return counts

    def with_input_size(self, width: int, height: int) -> "NetworkConfig":
        out = copy.deepcopy(self)
        out.net.params["width"] = str(width)
        out.net.params["height"] = str(height)
        return out


# ------------------------------------------------------------------ parsing


def _strip_comment(line: str) -> str:
    for marker in ("#", ";"):
        pos = line.find(marker)
        if pos >= 0:
            line = line[:pos]
    return line.strip()


def parse_config(text: str | Iterable[str]) -> NetworkConfig:
    """Parse Darknet config text into a validated :class:`NetworkConfig`.

    Unknown keys inside known sections are kept verbatim and reported in
    ``cfg.warnings``.  Shape consistency is checked before returning.
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    sections: list[LayerSpec] = []
    warnings: list[str] = []
    for lineno, raw in enumerate(lines, start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise MalformedLine(lineno, raw)
            name = line[1:-1].strip()
            if name not in KINDS:
                raise UnknownSection(name, lineno)
            if name == "net":
                if sections:
                    if any(s.kind == "net" for s in sections):
                        raise DuplicateNetSection(lineno)
                    raise MissingNetSection(lineno)
            elif not sections:
                raise MissingNetSection(lineno)
            sections.append(LayerSpec(name, {}, lineno))
            continue
        if "=" not in line or not sections:
            raise MalformedLine(lineno, raw)
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise MalformedLine(lineno, raw)
        section = sections[-1]
        if key not in _KNOWN_KEYS[section.kind] and key not in _ANY_LAYER_KEYS:
            warnings.append(f"line {lineno}: unknown key {key!r} in [{section.kind}] kept verbatim")
        section.params[key] = value

    if not sections:
        raise MissingNetSection()
    cfg = NetworkConfig(sections[0], sections[1:], warnings)
    for w in warnings:
        log.warning(w)
    validate(cfg)
    return cfg


def load_config(path) -> NetworkConfig:
    with open(path, encoding="ascii", errors="replace") as fh:
        return parse_config(fh.read())


def resolve_refs(cfg: NetworkConfig, index: int) -> list[int]:
    """Absolute indices of the layers that ``cfg.layers[index]`` reads from."""
    layer = cfg.layers[index]
    if layer.kind == "route":
        raw = layer.get_ints("layers", index=index)
        if not raw:
            raise InvalidParameter(index, "layers", layer.get("layers", ""), layer.source_line)
    elif layer.kind == "shortcut":
        raw = [layer.get_int("from", index=index)]
    else:
        return [index - 1] if index > 0 else []
    refs = []
    for r in raw:
        ref = index + r if r < 0 else r
        if not 0 <= ref < index:
            raise DanglingReference(index, ref, layer.source_line)
        refs.append(ref)
    if layer.kind == "shortcut":
        refs = [index - 1] + refs
        if index == 0:
            raise DanglingReference(index, -1, layer.source_line)
    return refs


def validate(cfg: NetworkConfig) -> None:
    for i, layer in enumerate(cfg.layers):
        if layer.kind == "net":
            raise DuplicateNetSection(layer.source_line)
        if layer.kind == "convolutional":
            if layer.get_int("filters", index=i) <= 0:
                raise InvalidParameter(i, "filters", layer.get("filters"), layer.source_line)
            if layer.get_int("size", 1, index=i) <= 0:
                raise InvalidParameter(i, "size", layer.get("size"), layer.source_line)
            if layer.get_int("stride", 1, index=i) < 1:
                raise InvalidParameter(i, "stride", layer.get("stride"), layer.source_line)
        elif layer.kind in ("maxpool", "upsample"):
            if layer.get_int("stride", 1 if layer.kind == "maxpool" else 2, index=i) < 1:
                raise InvalidParameter(i, "stride", layer.get("stride"), layer.source_line)
            if layer.kind == "maxpool" and layer.get_int("size", 1, index=i) < 1:
                raise InvalidParameter(i, "size", layer.get("size"), layer.source_line)
        elif layer.kind == "route":
            if "groups" in layer.params or "group_id" in layer.params:
                raise UnsupportedFeature(
                    f"layer {i}: route groups/group_id are not supported", layer.source_line
                )
        elif layer.kind == "yolo":
            anchors = layer.get_ints("anchors", index=i)
            if len(anchors) % 2:
                raise InvalidParameter(i, "anchors", layer.get("anchors"), layer.source_line)
            for m in yolo_mask(layer, index=i):
                if not 0 <= m < len(anchors) // 2:
                    raise InvalidParameter(i, "mask", layer.get("mask"), layer.source_line)
            if layer.get_int("classes", 80, index=i) < 1:
                raise InvalidParameter(i, "classes", layer.get("classes"), layer.source_line)
        resolve_refs(cfg, i)
    compute_output_shapes(cfg)


def yolo_mask(layer: LayerSpec, *, index: int = -1) -> list[int]:
    mask = layer.get_ints("mask", index=index)
    if mask:
        return mask
    return list(range(len(layer.get_ints("anchors", index=index)) // 2))


def yolo_anchors(layer: LayerSpec) -> list[tuple[int, int]]:
    """Anchor (w, h) pairs selected by the layer's mask, in pixels."""
    flat = layer.get_ints("anchors")
    pairs = [(flat[2 * k], flat[2 * k + 1]) for k in range(len(flat) // 2)]
    return [pairs[m] for m in yolo_mask(layer)]


# ------------------------------------------------------------------- shapes


def conv_padding(layer: LayerSpec) -> int:
    size = layer.get_int("size", 1)
    if layer.get_int("pad", 0) == 1:
        return size // 2
    return layer.get_int("padding", 0)


def maxpool_padding(layer: LayerSpec) -> int:
    return layer.get_int("padding", layer.get_int("size", 1) - 1)


def compute_output_shapes(cfg: NetworkConfig) -> list[Shape]:
    """Output (channels, height, width) of every layer, in order."""
    shapes: list[Shape] = []
    for i, layer in enumerate(cfg.layers):
        c, h, w = shapes[i - 1] if i else cfg.input_shape
        if layer.kind == "convolutional":
            size = layer.get_int("size", 1)
            stride = layer.get_int("stride", 1)
            pad = conv_padding(layer)
            out = (layer.get_int("filters"), (h + 2 * pad - size) // stride + 1, (w + 2 * pad - size) // stride + 1)
        elif layer.kind == "maxpool":
            size = layer.get_int("size", 1)
            stride = layer.get_int("stride", 1)
            pad = maxpool_padding(layer)
            out = (c, (h + pad - size) // stride + 1, (w + pad - size) // stride + 1)
        elif layer.kind == "upsample":
            stride = layer.get_int("stride", 2)
            out = (c, h * stride, w * stride)
        elif layer.kind == "route":
            refs = resolve_refs(cfg, i)
            first = shapes[refs[0]]
            total = 0
            for r in refs:
                if shapes[r][1:] != first[1:]:
                    raise ShapeMismatch(i, first[1:], shapes[r][1:], layer.source_line)
                total += shapes[r][0]
            out = (total, first[1], first[2])
        elif layer.kind == "shortcut":
            primary, other = resolve_refs(cfg, i)
            if shapes[other] != shapes[primary]:
                raise ShapeMismatch(i, shapes[primary], shapes[other], layer.source_line)
            out = shapes[primary]
        elif layer.kind == "yolo":
            out = (c, h, w)
            expected = len(yolo_mask(layer)) * (layer.get_int("classes", 80) + 5)
            if c != expected:
                raise ShapeMismatch(i, expected, c, layer.source_line)
        else:  # pragma: no cover - rejected at parse time
            raise UnknownSection(layer.kind, layer.source_line)
        if min(out) <= 0:
            raise NonPositiveShape(i, out, layer.source_line)
        shapes.append(out)
    return shapes


def input_shapes(cfg: NetworkConfig) -> list[Shape]:
    """Shape of the tensor each layer consumes (its predecessor's output)."""
    outs = compute_output_shapes(cfg)
    return [cfg.input_shape] + outs[:-1] if outs else []


def count_parameters(cfg: NetworkConfig) -> int:
    """Stored float count: conv weights + biases, plus 3 per filter with BN."""
    total = 0
    for layer, (c, _, _) in zip(cfg.layers, input_shapes(cfg)):
        if layer.kind != "convolutional":
            continue
        n = layer.get_int("filters")
        size = layer.get_int("size", 1)
        total += n * c * size * size + n
        if layer.batch_normalize:
            total += 3 * n
    return total


# ---------------------------------------------------------------- rewriting


def rewrite_for_classes(cfg: NetworkConfig, num_classes: int) -> NetworkConfig:
    """Retarget every yolo head to ``num_classes`` classes."""
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    out = copy.deepcopy(cfg)
    for i in out.indices("yolo"):
        if i == 0 or out.layers[i - 1].kind != "convolutional":
            raise YoloWithoutHeadConv(i)
        yolo = out.layers[i]
        yolo.params["classes"] = str(num_classes)
        out.layers[i - 1].params["filters"] = str((num_classes + 5) * len(yolo_mask(yolo, index=i)))
    validate(out)
    return out


def apply_freeze(cfg: NetworkConfig, first_trainable_layer: int) -> NetworkConfig:
    """Mark layers ``[0, first_trainable_layer)`` frozen via ``stopbackward=1``.

    The directive goes on the last frozen layer only; any existing
    ``stopbackward`` keys are dropped so the result has a single boundary.
    """
    n = len(cfg.layers)
    if not 0 <= first_trainable_layer <= n:
        raise IndexOutOfRange(first_trainable_layer, n)
    out = copy.deepcopy(cfg)
    for layer in out.layers:
        layer.params.pop("stopbackward", None)
    if first_trainable_layer > 0:
        out.layers[first_trainable_layer - 1].params["stopbackward"] = "1"
    return out


def frozen_boundary(cfg: NetworkConfig) -> int:
    """Index of the first trainable layer implied by ``stopbackward`` keys."""
    last = -1
    for i, layer in enumerate(cfg.layers):
        if layer.params.get("stopbackward", "0").strip() not in ("", "0"):
            last = i
    return last + 1


def serialize_config(cfg: NetworkConfig) -> str:
    blocks = []
    for section in [cfg.net, *cfg.layers]:
        lines = [f"[{section.kind}]"]
        lines.extend(f"{k}={v}" for k, v in section.params.items())
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)
