"""A loaded detector: config + folded weights + class names."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import head as yolo_head
from .cfg import NetworkConfig, load_config, yolo_anchors
from .ops import ForwardStats, Workspace, forward
from .weights import ModelWeights, load_weights, random_weights


@dataclass
class Model:
    cfg: NetworkConfig
    weights: ModelWeights
    names: list[str] = field(default_factory=list)
    threads: int = 1
    impl: str = "optimized"
    _workspace: Workspace | None = field(default=None, repr=False)

    @classmethod
    def load(cls, cfg_path, weights_path=None, names_path=None, *, size: int | None = None,
             threads: int = 1, seed: int = 0) -> "Model":
        """Load from files; without ``weights_path`` use seeded random weights."""
        cfg = load_config(cfg_path)
        if size:
            cfg = cfg.with_input_size(size, size)
        weights = load_weights(weights_path, cfg) if weights_path else random_weights(cfg, seed)
        names = yolo_head.load_names(names_path) if names_path else []
        return cls(cfg, weights, names, threads)

    @property
    def net_size(self) -> tuple[int, int]:
        return (self.cfg.width, self.cfg.height)

    @property
    def workspace(self) -> Workspace:
        if self._workspace is None:
            self._workspace = Workspace.for_config(self.cfg, self.threads)
        return self._workspace

    def forward(self, x: np.ndarray, stats: ForwardStats | None = None) -> list[np.ndarray]:
        return forward(self.cfg, self.weights, x, workspace=self.workspace, impl=self.impl, stats=stats)

    def preprocess(self, image: np.ndarray):
        return yolo_head.letterbox(image, self.net_size)

    def decode(self, heads: list[np.ndarray], conf_threshold: float = yolo_head.CONF_THRESHOLD):
        dets = []
        for i, h in zip(self.cfg.indices("yolo"), heads):
            layer = self.cfg.layers[i]
            dets.extend(yolo_head.decode_head(
                h, yolo_anchors(layer), self.net_size, layer.get_int("classes", 80),
                conf_threshold, self.names,
            ))
        return dets

    def detect(self, image: np.ndarray, conf_threshold: float = yolo_head.CONF_THRESHOLD,
               iou_threshold: float = yolo_head.IOU_THRESHOLD) -> list[yolo_head.Detection]:
        """Letterbox, run, decode, suppress and map back to image coordinates."""
        tensor, transform = self.preprocess(image)
        dets = self.decode(self.forward(tensor), conf_threshold)
        return yolo_head.unletterbox(yolo_head.nms(dets, iou_threshold), transform)
