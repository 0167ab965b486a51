from ._hydet import (
    average_precision,
    bce,
    ciou_loss,
    detect,
    dfl_decode,
    iou,
    lr_at,
    model_summary,
    nms,
)

__all__ = [
    "average_precision",
    "bce",
    "ciou_loss",
    "detect",
    "dfl_decode",
    "iou",
    "lr_at",
    "model_summary",
    "nms",
]
