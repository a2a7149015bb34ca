"""VOC-style average precision and CorLoc."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, Detection, boxes_to_array, iou_matrix

PASCAL_IOU = 0.5


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_threshold: float = PASCAL_IOU) -> np.ndarray:
    """Greedy TP/FP flags for one class in one image.

    ``dets`` must already be in descending score order. Each detection takes the
    unmatched ground truth it overlaps most, provided that IoU is strictly above
    the threshold; otherwise it is a false positive.
    """
    tp = np.zeros(len(dets), dtype=bool)
    if len(dets) == 0 or len(gts) == 0:
        return tp
    overlaps = iou_matrix(boxes_to_array(dets), boxes_to_array(gts))
    taken = np.zeros(len(gts), dtype=bool)
    for i in range(len(dets)):
        row = np.where(taken, -1.0, overlaps[i])
        j = int(np.argmax(row))
        if row[j] > iou_threshold:
            taken[j] = True
            tp[i] = True
    return tp


def precision_recall(tp_flags: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(tp_flags.astype(np.float64))
    fp = np.cumsum((~tp_flags).astype(np.float64))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def voc_ap_11point(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean over recall thresholds 0, 0.1, ..., 1 of the best precision reaching them."""
    ap = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        reach = recall >= t
        ap += float(np.max(precision[reach])) if reach.any() else 0.0
    return ap / 11.0


def voc_ap_area(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point variant)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class EvalReport:
    num_classes: int
    ap: dict[int, float] = field(default_factory=dict)  # class_id -> AP, classes with GT only
    corloc: dict[int, float] = field(default_factory=dict)
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    num_gt: dict[int, int] = field(default_factory=dict)

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    @property
    def corloc_mean(self) -> float:
        return float(np.mean(list(self.corloc.values()))) if self.corloc else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap", "corloc", "tp", "fp", "gt"])
        for c in range(1, self.num_classes + 1):
            w.writerow([c, _fmt(self.ap.get(c)), _fmt(self.corloc.get(c)),
                        self.tp.get(c, 0), self.fp.get(c, 0), self.num_gt.get(c, 0)])
        w.writerow(["mean", _fmt(self.mAP if self.ap else None), _fmt(self.corloc_mean if self.corloc else None),
                    sum(self.tp.values()), sum(self.fp.values()), sum(self.num_gt.values())])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'class':>6} {'AP':>7} {'CorLoc':>7} {'TP':>5} {'FP':>6} {'GT':>5}"]
        for c in range(1, self.num_classes + 1):
            ap = f"{100 * self.ap[c]:7.2f}" if c in self.ap else f"{'-':>7}"
            cl = f"{100 * self.corloc[c]:7.2f}" if c in self.corloc else f"{'-':>7}"
            lines.append(f"{c:>6} {ap} {cl} {self.tp.get(c, 0):>5} {self.fp.get(c, 0):>6} {self.num_gt.get(c, 0):>5}")
        lines.append(f"{'mean':>6} {100 * self.mAP:7.2f} {100 * self.corloc_mean:7.2f}")
        return "\n".join(lines) + "\n"


def _fmt(x):
    return "" if x is None else repr(float(x))


def _gt_by_class(gt: Sequence[tuple[int, Box]] | None, class_id: int) -> list[Box]:
    return [b for c, b in (gt or []) if c == class_id]


def average_precision(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[tuple[int, Box]]],
    class_id: int,
    use_11_point: bool = True,
) -> tuple[float | None, int, int, int]:
    """AP of one class over a set of images; ``None`` when the class has no GT.

    Returns ``(ap, tp, fp, num_gt)``.
    """
    num_gt = sum(len(_gt_by_class(g, class_id)) for g in ground_truth.values())
    pooled = []  # (-score, image order, det order, image_id, box)
    for n, (image_id, dets) in enumerate(sorted(detections.items())):
        for m, d in enumerate(dets):
            if d.class_id == class_id:
                pooled.append((-d.score, n, m, image_id, d.box))
    pooled.sort(key=lambda t: t[:3])
    flags = np.zeros(len(pooled), dtype=bool)
    by_image: dict[str, list[int]] = {}
    for k, entry in enumerate(pooled):
        by_image.setdefault(entry[3], []).append(k)
    for image_id, idx in by_image.items():
        gts = _gt_by_class(ground_truth.get(image_id), class_id)
        flags[idx] = match_detections([pooled[k][4] for k in idx], gts)
    tp, fp = int(flags.sum()), int((~flags).sum())
    if num_gt == 0:
        return None, tp, fp, 0
    if len(pooled) == 0:
        return 0.0, 0, 0, num_gt
    precision, recall = precision_recall(flags, num_gt)
    ap = voc_ap_11point(precision, recall) if use_11_point else voc_ap_area(precision, recall)
    return ap, tp, fp, num_gt


def corloc(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[tuple[int, Box]]],
    class_id: int,
) -> float | None:
    """Fraction of images containing ``class_id`` whose top detection of that class hits a GT."""
    hits = total = 0
    for image_id, gt in ground_truth.items():
        gts = _gt_by_class(gt, class_id)
        if not gts:
            continue
        total += 1
        cands = [d for d in detections.get(image_id, ()) if d.class_id == class_id]
        if not cands:
            continue
        best = min(range(len(cands)), key=lambda i: (-cands[i].score, i))
        if np.max(iou_matrix(boxes_to_array([cands[best].box]), boxes_to_array(gts))) > PASCAL_IOU:
            hits += 1
    return hits / total if total else None


def evaluate(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[tuple[int, Box]]],
    num_classes: int,
    use_11_point: bool = True,
) -> EvalReport:
    report = EvalReport(num_classes=num_classes)
    for c in range(1, num_classes + 1):
        ap, tp, fp, n = average_precision(detections, ground_truth, c, use_11_point)
        report.tp[c], report.fp[c], report.num_gt[c] = tp, fp, n
        if ap is not None:
            report.ap[c] = ap
        cl = corloc(detections, ground_truth, c)
        if cl is not None:
            report.corloc[c] = cl
    return report
