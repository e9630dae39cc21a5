"""CPU YOLOv3 runtime and tooling for detection-gated breathalyzer verification."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(name: str) -> Path:
    """Path to a bundled file (``yolov3.cfg``, ``yolov3-tiny.cfg``, ``coco.names`` ...)."""
    return Path(str(resources.files(__package__).joinpath("data", name)))
