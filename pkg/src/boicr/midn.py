"""Basic instance classifier: shared trunk, two-stream scoring and image loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import Box
from .numcore import Node, ParamTensor, Tape, image_cross_entropy, linear_forward


class TrainingView(NamedTuple):
    """What the training path may see of an image: no ground truth."""

    image_id: str
    labels: np.ndarray
    proposals: np.ndarray
    features: np.ndarray


@dataclass
class ImageSample:
    """One image as a bag of proposals.

    Attributes:
        image_id: unique name.
        labels: length-C binary vector of classes present.
        proposals: |R| x 4 boxes (x1, y1, x2, y2).
        features: |R| x D_raw proposal descriptors.
        gt: optional ``(class_id, Box)`` pairs with 1-based class ids; used for
            evaluation only.
    """

    image_id: str
    labels: np.ndarray
    proposals: np.ndarray
    features: np.ndarray
    gt: list[tuple[int, Box]] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.proposals = np.asarray(self.proposals, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.proposals.shape[0]:
            raise ValueError(
                f"{self.image_id}: {self.proposals.shape[0]} proposals but features of shape {self.features.shape}"
            )

    @property
    def num_classes(self) -> int:
        return self.labels.shape[0]

    def training_view(self) -> TrainingView:
        return TrainingView(self.image_id, self.labels, self.proposals, self.features)


@dataclass
class TrunkParams:
    w1: ParamTensor
    b1: ParamTensor
    w2: ParamTensor
    b2: ParamTensor

    def tensors(self) -> list[ParamTensor]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class MidnParams:
    w_cls: ParamTensor
    b_cls: ParamTensor
    w_det: ParamTensor  # no bias: a per-class shift cancels in the proposal softmax

    def tensors(self) -> list[ParamTensor]:
        return [self.w_cls, self.b_cls, self.w_det]


@dataclass
class MidnOutput:
    x_c: Node  # C x |R|, columns sum to 1
    x_d: Node  # C x |R|, rows sum to 1
    x_R: Node  # x_c * x_d
    phi: Node  # length C, image-level scores


def trunk_forward(tape: Tape, raw_features: Node, trunk: TrunkParams) -> Node:
    """Two affine+relu layers shared by every head."""
    h = tape.relu(linear_forward(tape, raw_features, trunk.w1, trunk.b1))
    return tape.relu(linear_forward(tape, h, trunk.w2, trunk.b2))


def midn_forward(tape: Tape, features: Node, head: MidnParams) -> MidnOutput:
    cls_logits = tape.transpose(linear_forward(tape, features, head.w_cls, head.b_cls))
    det_logits = tape.transpose(linear_forward(tape, features, head.w_det))
    x_c = tape.softmax_over_classes(cls_logits)
    x_d = tape.softmax_over_proposals(det_logits)
    x_R = tape.hadamard(x_c, x_d)
    phi = tape.sum(x_R, axis=1)
    return MidnOutput(x_c=x_c, x_d=x_d, x_R=x_R, phi=phi)


def classification_loss(phi: np.ndarray, labels: np.ndarray) -> float:
    """Image-level multi-label cross entropy; scores are clamped away from 0 and 1."""
    return image_cross_entropy(np.asarray(phi, dtype=np.float64), labels)
