"""The combined confidence + localization objective with hard-negative mining.

Per batch: L = (L_conf + alpha * L_loc) / N, where N is the number of matched
(positive) priors. L_loc sums smooth-L1 over the four offsets of every
positive; L_conf sums cross-entropy over positives plus the mined hardest
background priors at neg_pos_ratio : 1 per image. N = 0 makes every term 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .matching import MatchAssignment


@dataclass(frozen=True)
class LossBreakdown:
    conf: float
    loc: float
    alpha: float
    n: int
    total: float


def smooth_l1(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _mine_negatives(log_probs: np.ndarray, positive: np.ndarray, n_neg: int) -> np.ndarray:
    """Indices of the hardest background priors: highest -log p(background)."""
    bg_loss = -log_probs[:, 0]
    candidates = np.flatnonzero(~positive)
    if n_neg <= 0 or len(candidates) == 0:
        return np.empty(0, dtype=np.int64)
    order = candidates[np.argsort(-bg_loss[candidates], kind="stable")]
    return order[: min(n_neg, len(order))]


def mine_hard_negatives(
    pred_logits: np.ndarray,
    assignments: Sequence[MatchAssignment],
    neg_pos_ratio: int = 3,
) -> list[np.ndarray]:
    """The per-image mined negative sets, exposed so callers (gradient checks,
    oracles) can hold the discrete selection fixed."""
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    out = []
    for b, a in enumerate(assignments):
        log_probs = _log_softmax(pred_logits[b])
        out.append(_mine_negatives(log_probs, a.positive_mask, neg_pos_ratio * a.n_positives))
    return out


def multibox_loss(
    pred_offsets: np.ndarray,
    pred_logits: np.ndarray,
    assignments: Sequence[MatchAssignment],
    alpha: float = 1.0,
    neg_pos_ratio: int = 3,
    negatives: Sequence[np.ndarray] | None = None,
) -> LossBreakdown:
    loss, _, _ = multibox_loss_and_grads(
        pred_offsets, pred_logits, assignments, alpha, neg_pos_ratio,
        negatives=negatives, want_grads=False,
    )
    return loss


def multibox_loss_and_grads(
    pred_offsets: np.ndarray,
    pred_logits: np.ndarray,
    assignments: Sequence[MatchAssignment],
    alpha: float = 1.0,
    neg_pos_ratio: int = 3,
    negatives: Sequence[np.ndarray] | None = None,
    want_grads: bool = True,
) -> tuple[LossBreakdown, np.ndarray | None, np.ndarray | None]:
    """Loss plus (when requested) its exact gradients w.r.t. offsets and logits."""
    pred_offsets = np.asarray(pred_offsets, dtype=np.float64)
    pred_logits = np.asarray(pred_logits, dtype=np.float64)
    if pred_offsets.ndim == 2:
        pred_offsets = pred_offsets[None]
        pred_logits = pred_logits[None]
        assignments = [assignments] if isinstance(assignments, MatchAssignment) else assignments
    B, P, _ = pred_offsets.shape
    if pred_logits.shape[:2] != (B, P):
        raise ValueError(
            f"offsets {pred_offsets.shape} and logits {pred_logits.shape} disagree on batch/prior counts"
        )
    if len(assignments) != B:
        raise ValueError(f"{len(assignments)} assignments for a batch of {B}")

    n_total = sum(a.n_positives for a in assignments)
    d_off = np.zeros_like(pred_offsets) if want_grads else None
    d_log = np.zeros_like(pred_logits) if want_grads else None
    if n_total == 0:
        return LossBreakdown(0.0, 0.0, alpha, 0, 0.0), d_off, d_log

    loc_sum = 0.0
    conf_sum = 0.0
    for b, a in enumerate(assignments):
        pos = a.positive_mask
        log_probs = _log_softmax(pred_logits[b])
        if pos.any():
            diff = pred_offsets[b][pos] - a.offset_targets[pos]
            loc_sum += float(smooth_l1(diff).sum())
            conf_sum += float(-log_probs[pos, a.class_targets[pos]].sum())
            if want_grads:
                d_off[b][pos] = smooth_l1_grad(diff) * (alpha / n_total)
        if negatives is None:
            mined = _mine_negatives(log_probs, pos, neg_pos_ratio * int(pos.sum()))
        else:
            mined = np.asarray(negatives[b], dtype=np.int64)
        if len(mined):
            conf_sum += float(-log_probs[mined, 0].sum())
        if want_grads:
            probs = np.exp(log_probs)
            selected = np.concatenate([np.flatnonzero(pos), mined])
            targets = np.concatenate([a.class_targets[pos], np.zeros(len(mined), dtype=np.int64)])
            grad = probs[selected]
            grad[np.arange(len(selected)), targets] -= 1.0
            d_log[b][selected] += grad / n_total

    total = (conf_sum + alpha * loc_sum) / n_total
    return LossBreakdown(conf_sum, loc_sum, alpha, n_total, total), d_off, d_log
