"""Decode predictions into detections: softmax scores, per-class greedy NMS,
top-k cap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..labels import BoundingBox, StageClass
from .matching import iou_matrix
from .network import MiniSSD
from .priors import decode


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    stage: StageClass
    score: float


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.45) -> list[int]:
    """Greedy suppression: walk by descending score (ties by index), drop any
    box overlapping a kept one above the threshold."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep: list[int] = []
    if len(order) == 0:
        return keep
    iou = iou_matrix(boxes, boxes)
    for idx in order:
        if all(iou[idx, k] <= iou_threshold for k in keep):
            keep.append(int(idx))
    return keep


def infer(
    model: MiniSSD,
    image: np.ndarray,
    score_threshold: float = 0.5,
    nms_iou: float = 0.45,
    top_k: int = 200,
) -> list[Detection]:
    offsets, logits = model.forward(np.asarray(image, dtype=np.float64)[None])
    logits = logits[0].astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    decoded = np.clip(decode(offsets[0], model.priors), 0.0, 1.0)

    detections: list[Detection] = []
    for c in range(1, model.config.num_classes + 1):
        scores = probs[:, c]
        mask = scores >= score_threshold
        valid = (decoded[:, 2] - decoded[:, 0] > 1e-6) & (decoded[:, 3] - decoded[:, 1] > 1e-6)
        idx = np.flatnonzero(mask & valid)
        if len(idx) == 0:
            continue
        for k in nms(decoded[idx], scores[idx], nms_iou):
            p = idx[k]
            detections.append(
                Detection(
                    BoundingBox(*decoded[p]), StageClass(c - 1), float(scores[p])
                )
            )
    detections.sort(key=lambda d: -d.score)
    return detections[:top_k]
