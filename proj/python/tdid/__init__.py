"""Target driven instance detection: detector, dataset generator and evaluation helpers."""

from ._core import (
    Detector,
    TdidError,
    average_precision,
    generate_anchors,
    generate_dataset,
    iou,
    nms,
    run_cli,
)

__all__ = [
    "Detector",
    "TdidError",
    "average_precision",
    "generate_anchors",
    "generate_dataset",
    "iou",
    "nms",
    "run_cli",
]
