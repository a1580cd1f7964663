"""Detection scoring: IoU, precision-recall curves, AP as area under the
interpolated curve, and mAP over the classes present in the ground truth.

Matching follows the VOC convention: detections are walked in descending
score order (ties by input index); each one matches the highest-IoU not-yet-
matched ground truth of its class on its image, at or above the IoU
threshold, and counts as a true positive, otherwise a false positive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .labels import BoundingBox, StageClass


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    label: int
    box: BoundingBox


@dataclass(frozen=True)
class ScoredDetection:
    image_id: int
    label: int
    box: BoundingBox
    score: float


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    score: float


@dataclass(frozen=True)
class APResult:
    label: int
    ap: float
    curve: tuple[PRPoint, ...]
    tp: int
    fp: int
    num_gt: int


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix0, iy0 = max(a.xmin, b.xmin), max(a.ymin, b.ymin)
    ix1, iy1 = min(a.xmax, b.xmax), min(a.ymax, b.ymax)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def pr_curve(
    detections: Sequence[ScoredDetection],
    ground_truths: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> list[PRPoint]:
    """Single-class curve; callers pass detections/gts already filtered to one label."""
    num_gt = len(ground_truths)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    matched: set[int] = set()
    tp = fp = 0
    points: list[PRPoint] = []
    for i in order:
        det = detections[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(ground_truths):
            if j in matched or gt.image_id != det.image_id:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched.add(best_j)
            tp += 1
        else:
            fp += 1
        recall = tp / num_gt if num_gt else 0.0
        precision = tp / (tp + fp)
        points.append(PRPoint(recall, precision, det.score))
    return points


def average_precision(curve: Sequence[PRPoint], num_gt: int, interpolation: str = "all_point") -> float:
    """Area under the interpolated curve.

    all_point: p_interp(r) = max precision at recall >= r, integrated exactly.
    voc2007: mean of p_interp over the 11 recall points 0.0, 0.1, ..., 1.0.
    """
    if num_gt == 0:
        raise ValueError("average precision needs at least one ground truth")
    if not curve:
        return 0.0
    recalls = np.array([p.recall for p in curve])
    precisions = np.array([p.precision for p in curve])
    if interpolation == "voc2007":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recalls >= r - 1e-12
            ap += precisions[mask].max() if mask.any() else 0.0
        return ap / 11.0
    if interpolation != "all_point":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    # envelope: running max of precision from the high-recall end
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def evaluate_detections(
    detections: Iterable[ScoredDetection],
    ground_truths: Iterable[GroundTruth],
    iou_threshold: float = 0.5,
    interpolation: str = "all_point",
) -> dict[int, APResult]:
    """Per-class AP for every label present in the ground truth."""
    detections = list(detections)
    ground_truths = list(ground_truths)
    labels = sorted({gt.label for gt in ground_truths})
    if not labels:
        raise ValueError("no ground-truth classes to evaluate")
    results: dict[int, APResult] = {}
    for label in labels:
        dets = [d for d in detections if d.label == label]
        gts = [g for g in ground_truths if g.label == label]
        curve = pr_curve(dets, gts, iou_threshold)
        ap = average_precision(curve, len(gts), interpolation)
        tp = round(curve[-1].recall * len(gts)) if curve else 0
        results[label] = APResult(
            label=label,
            ap=ap,
            curve=tuple(curve),
            tp=tp,
            fp=len(curve) - tp,
            num_gt=len(gts),
        )
    return results


def mean_ap(results: dict[int, APResult]) -> float:
    if not results:
        raise ValueError("mean over zero classes")
    return float(np.mean([r.ap for r in results.values()]))


def write_report(results: dict[int, APResult], path, iou_threshold: float, interpolation: str) -> None:
    """CSV: one header row naming the settings, then (class, ap, num_gt, num_det)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"iou_threshold={iou_threshold}", f"interpolation={interpolation}"])
        writer.writerow(["class", "ap", "num_gt", "num_det"])
        for label, r in sorted(results.items()):
            name = StageClass(label).wire_name if label in set(int(s) for s in StageClass) else str(label)
            writer.writerow([name, f"{r.ap:.6f}", r.num_gt, r.tp + r.fp])
        writer.writerow(["mAP", f"{mean_ap(results):.6f}", "", ""])


def write_curves(results: dict[int, APResult], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "score", "recall", "precision"])
        for label, r in sorted(results.items()):
            for p in r.curve:
                writer.writerow([label, f"{p.score:.6f}", f"{p.recall:.6f}", f"{p.precision:.6f}"])
