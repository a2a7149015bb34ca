"""Refinement agents: (C+1)-way heads, online supervision mining and their loss.

Class rows are 0-based throughout; row ``C`` is background and ``IGNORE`` (-1)
marks proposals excluded from the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import iou_matrix
from .numcore import IGNORE, Node, ParamTensor, Tape, linear_forward, weighted_nll


@dataclass
class AgentScores:
    """Column-stochastic (C+1) x |R| score table of one head."""

    scores: np.ndarray
    agent_index: int | str  # 1..K or "distill"


@dataclass
class SupervisionTarget:
    labels: np.ndarray  # int, per proposal: 0..C-1 class, C background, -1 ignore
    weights: np.ndarray  # float, per proposal
    seeds: dict[int, int] = field(default_factory=dict)  # class row -> seed proposal


def agent_forward(tape: Tape, features: Node, weights: ParamTensor, bias: ParamTensor) -> Node:
    """Score every proposal over C+1 classes; returns a (C+1) x |R| node."""
    logits = linear_forward(tape, features, weights, bias)
    return tape.softmax_over_classes(tape.transpose(logits))


def select_best_instance(prev_scores: np.ndarray, class_id: int, image_labels=None) -> int:
    """Index of the top-scoring proposal for class row ``class_id``.

    Ties go to the lowest index (``np.argmax`` semantics).
    """
    if image_labels is not None and not image_labels[class_id]:
        raise ValueError(f"class {class_id} is not present in the image")
    return int(np.argmax(prev_scores[class_id]))


def _class_rows(prev_scores: np.ndarray, num_classes: int) -> np.ndarray:
    rows = prev_scores.shape[0]
    if rows == num_classes:
        return prev_scores
    if rows == num_classes + 1:
        return prev_scores[:num_classes]
    raise ValueError(f"score table has {rows} rows; expected {num_classes} or {num_classes + 1}")


def build_supervision(
    prev_scores: np.ndarray,
    proposals: np.ndarray,
    image_labels: np.ndarray,
    lam: float,
    lam_ign: float,
    ignore_enabled: bool,
) -> SupervisionTarget:
    """Mine per-proposal labels and weights from the previous head's scores.

    Each present class seeds at its best proposal. Every proposal is attached to
    the seed it overlaps most (ties: higher seed score, then lower class), and
    is labelled with that class when the overlap reaches ``lam``. Below that it
    is background, or, with the ignore band on, background only down to
    ``lam_ign`` and ignored under it. The loss weight of a proposal is the score
    of its seed.

    Args:
        prev_scores: C x |R| table, or (C+1) x |R| whose background row is dropped.
        proposals: |R| x 4 boxes.
        image_labels: length-C binary vector of present classes.
        lam: positive IoU threshold.
        lam_ign: lower end of the background band.
        ignore_enabled: whether proposals under ``lam_ign`` are ignored.
    """
    image_labels = np.asarray(image_labels)
    num_classes = image_labels.shape[0]
    scores = _class_rows(np.asarray(prev_scores, dtype=np.float64), num_classes)
    present = np.flatnonzero(image_labels)
    if present.size == 0:
        raise ValueError("image has no positive labels; cannot mine supervision")

    seed_idx = np.argmax(scores[present], axis=1)
    seed_score = scores[present, seed_idx]
    overlaps = iou_matrix(proposals, proposals[seed_idx])  # |R| x P

    # argmax IoU, then higher seed score, then lower class
    rank = np.lexsort((present, -seed_score))
    ordered = overlaps[:, rank]
    pick = rank[np.argmax(ordered, axis=1)]
    rows = np.arange(len(proposals))
    v = overlaps[rows, pick]
    cls = present[pick]

    labels = np.full(len(proposals), num_classes, dtype=np.int64)
    pos = v >= lam
    labels[pos] = cls[pos]
    if ignore_enabled:
        labels[~pos & (v < lam_ign)] = IGNORE
    weights = seed_score[pick].astype(np.float64)

    # a seed always carries its own class; a proposal seeding several classes
    # goes to the owner with the higher seed score, then the lower class
    for j in np.unique(seed_idx):
        owners = np.flatnonzero(seed_idx == j)
        best = min(owners, key=lambda p: (-seed_score[p], present[p]))
        labels[j] = present[best]
        weights[j] = seed_score[best]
    return SupervisionTarget(labels=labels, weights=weights,
                             seeds={int(c): int(j) for c, j in zip(present, seed_idx)})


def agent_loss(agent_scores: AgentScores | np.ndarray, sup: SupervisionTarget) -> float:
    """Weighted log loss of one head against mined supervision."""
    scores = agent_scores.scores if isinstance(agent_scores, AgentScores) else agent_scores
    if scores.shape[1] != sup.labels.shape[0]:
        raise ValueError(f"scores cover {scores.shape[1]} proposals, supervision {sup.labels.shape[0]}")
    return weighted_nll(scores, sup.labels, sup.weights)
