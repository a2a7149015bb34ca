"""Boxes, intersection-over-union and per-class non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box {self.as_tuple()}: need x1<=x2 and y1<=y2")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int  # 1-based
    score: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` [N, 4] and ``b`` [M, 4] (x1, y1, x2, y2 rows).

    Returns an [N, M] array. Pairs with zero union get IoU 0.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[int]:
    """Greedy per-class non-maximum suppression.

    Detections are visited by descending score (ties: lower index first). A
    detection is dropped iff its IoU with an already kept detection of the same
    class exceeds ``iou_threshold``.

    Returns:
        Indices into ``dets`` in the order they were kept.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if len(dets) == 0:
        return []
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = sorted(range(len(dets)), key=lambda i: (-scores[i], i))
    boxes = boxes_to_array([d.box for d in dets])
    kept: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        same = kept_by_class.setdefault(dets[i].class_id, [])
        if same:
            overlaps = iou_matrix(boxes[i], boxes[same])[0]
            if np.any(overlaps > iou_threshold):
                continue
        same.append(i)
        kept.append(i)
    return kept


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Single-class NMS over arrays; same ordering rules as :func:`nms`."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=np.int64)
