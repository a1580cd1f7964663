"""Assignment of priors to ground-truth boxes ahead of the loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priors import center_to_corner, encode


@dataclass(frozen=True)
class MatchAssignment:
    """Per-prior targets: gt_index is -1 for background, class_targets uses 0
    for background and class+1 otherwise."""

    gt_index: np.ndarray
    class_targets: np.ndarray
    offset_targets: np.ndarray
    positive_mask: np.ndarray

    @property
    def n_positives(self) -> int:
        return int(self.positive_mask.sum())


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form boxes, shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0.0, None), axis=-1)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=-1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def match_priors(
    priors_cs: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    iou_threshold: float = 0.5,
) -> MatchAssignment:
    """Threshold matching with the best-prior guarantee.

    Every prior whose best IoU strictly exceeds the threshold is positive for
    its best ground truth (ties to the lower gt index). Then every ground
    truth claims its own highest-IoU prior unconditionally, walked in gt order
    so no two ground truths claim the same prior.
    """
    P = len(priors_cs)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    gt_index = np.full(P, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return MatchAssignment(
            gt_index=gt_index,
            class_targets=np.zeros(P, dtype=np.int64),
            offset_targets=np.zeros((P, 4), dtype=np.float64),
            positive_mask=np.zeros(P, dtype=bool),
        )

    priors_corner = center_to_corner(priors_cs)
    iou = iou_matrix(priors_corner, gt_boxes)  # (P, G)
    best_gt = iou.argmax(axis=1)
    best_gt_iou = iou[np.arange(P), best_gt]
    gt_index[best_gt_iou > iou_threshold] = best_gt[best_gt_iou > iou_threshold]

    # best-prior guarantee: each gt claims its argmax prior, earlier gts first
    taken: set[int] = set()
    for g in range(len(gt_boxes)):
        order = np.argsort(-iou[:, g], kind="stable")
        for p in order:
            if int(p) not in taken:
                gt_index[p] = g
                taken.add(int(p))
                break

    positive = gt_index >= 0
    class_targets = np.zeros(P, dtype=np.int64)
    class_targets[positive] = gt_classes[gt_index[positive]] + 1
    offset_targets = np.zeros((P, 4), dtype=np.float64)
    if positive.any():
        offset_targets[positive] = encode(
            gt_boxes[gt_index[positive]], np.asarray(priors_cs)[positive]
        )
    return MatchAssignment(gt_index, class_targets, offset_targets, positive)
