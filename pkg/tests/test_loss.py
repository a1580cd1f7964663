import math

import numpy as np
import pytest

from etcdet.detector.loss import (
    LossBreakdown,
    multibox_loss,
    multibox_loss_and_grads,
    smooth_l1,
    smooth_l1_grad,
)
from etcdet.detector.matching import MatchAssignment, match_priors
from etcdet.detector.priors import PriorConfig, center_to_corner, generate_priors


def scalar_reference_loss(pred_offsets, pred_logits, assignments, alpha=1.0, neg_pos_ratio=3):
    """Independent non-vectorized implementation of the combined objective."""
    n = sum(int(a.positive_mask.sum()) for a in assignments)
    if n == 0:
        return 0.0, 0.0, 0.0
    conf = 0.0
    loc = 0.0
    for b, a in enumerate(assignments):
        P, C1 = pred_logits[b].shape

        def log_softmax_at(p, k):
            row = [float(v) for v in pred_logits[b][p]]
            m = max(row)
            z = sum(math.exp(v - m) for v in row)
            return row[k] - m - math.log(z)

        pos_indices = [p for p in range(P) if a.positive_mask[p]]
        for p in pos_indices:
            for d in range(4):
                x = float(pred_offsets[b][p][d]) - float(a.offset_targets[p][d])
                loc += 0.5 * x * x if abs(x) < 1.0 else abs(x) - 0.5
            conf += -log_softmax_at(p, int(a.class_targets[p]))
        bg = [(p, -log_softmax_at(p, 0)) for p in range(P) if not a.positive_mask[p]]
        bg.sort(key=lambda t: -t[1])  # stable: ties keep index order
        for p, bg_loss in bg[: neg_pos_ratio * len(pos_indices)]:
            conf += bg_loss
    return conf, loc, (conf + alpha * loc) / n


def random_fixture(rng, n_priors=12, n_classes=3, batch=2, max_gts=3):
    priors = generate_priors(
        PriorConfig(feature_map_sizes=(2,), scales=(0.3,), aspect_ratios=(1.0, 2.0, 0.5))
    )[:n_priors]
    assignments = []
    for _ in range(batch):
        n_gt = int(rng.integers(0, max_gts + 1))
        gts = []
        for _ in range(n_gt):
            cx, cy = rng.uniform(0.2, 0.8, 2)
            w, h = rng.uniform(0.1, 0.5, 2)
            gts.append([max(0, cx - w / 2), max(0, cy - h / 2), min(1, cx + w / 2), min(1, cy + h / 2)])
        assignments.append(
            match_priors(priors, np.array(gts).reshape(-1, 4), rng.integers(0, n_classes, n_gt))
        )
    pred_offsets = rng.normal(0, 1.5, size=(batch, n_priors, 4))
    pred_logits = rng.normal(0, 2.0, size=(batch, n_priors, n_classes + 1))
    return pred_offsets, pred_logits, assignments


class TestSmoothL1:
    def test_knee_values(self):
        assert smooth_l1(0.0) == 0.0
        assert smooth_l1(1.0) == pytest.approx(0.5)
        assert smooth_l1(-1.0) == pytest.approx(0.5)
        assert smooth_l1(2.0) == pytest.approx(1.5)
        assert smooth_l1(-3.0) == pytest.approx(2.5)

    def test_continuity_at_knee(self):
        eps = 1e-9
        assert smooth_l1(1.0 - eps) == pytest.approx(smooth_l1(1.0 + eps), abs=1e-8)

    def test_grad(self):
        assert smooth_l1_grad(0.5) == pytest.approx(0.5)
        assert smooth_l1_grad(3.0) == 1.0
        assert smooth_l1_grad(-3.0) == -1.0


class TestMultiboxLoss:
    def test_no_ground_truth_is_zero(self):
        rng = np.random.default_rng(0)
        priors = generate_priors(PriorConfig(feature_map_sizes=(2,), scales=(0.3,)))
        a = match_priors(priors, np.zeros((0, 4)), np.zeros(0, dtype=int))
        loss = multibox_loss(rng.normal(size=(1, len(priors), 4)), rng.normal(size=(1, len(priors), 4)), [a])
        assert loss == LossBreakdown(0.0, 0.0, 1.0, 0, 0.0)

    def test_perfect_offsets_zero_loc(self):
        rng = np.random.default_rng(1)
        pred_offsets, pred_logits, assignments = random_fixture(rng)
        for b, a in enumerate(assignments):
            pred_offsets[b][a.positive_mask] = a.offset_targets[a.positive_mask]
        loss = multibox_loss(pred_offsets, pred_logits, assignments)
        if loss.n:
            assert loss.loc == pytest.approx(0.0, abs=1e-12)
            assert loss.total == pytest.approx(loss.conf / loss.n)

    def test_matches_scalar_reference_on_100_fixtures(self):
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(100):
            pred_offsets, pred_logits, assignments = random_fixture(rng)
            got = multibox_loss(pred_offsets, pred_logits, assignments)
            conf, loc, total = scalar_reference_loss(pred_offsets, pred_logits, assignments)
            if got.n == 0:
                assert got.total == 0.0 == total
                continue
            assert got.total == pytest.approx(total, rel=1e-9)
            assert got.conf == pytest.approx(conf, rel=1e-9)
            assert got.loc == pytest.approx(loc, rel=1e-9, abs=1e-12)
            checked += 1
        assert checked >= 50  # most random fixtures have at least one gt

    def test_invariant_total_formula(self):
        rng = np.random.default_rng(5)
        pred_offsets, pred_logits, assignments = random_fixture(rng)
        loss = multibox_loss(pred_offsets, pred_logits, assignments, alpha=2.5)
        if loss.n:
            assert loss.total == pytest.approx((loss.conf + 2.5 * loss.loc) / loss.n)
        assert loss.conf >= 0 and loss.loc >= 0

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(6)
        pred_offsets, pred_logits, assignments = random_fixture(rng)
        with pytest.raises(ValueError, match="disagree"):
            multibox_loss(pred_offsets[:, :-1], pred_logits, assignments)
        with pytest.raises(ValueError, match="assignments"):
            multibox_loss(pred_offsets, pred_logits, assignments[:-1])

    def test_prediction_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        pred_offsets, pred_logits, assignments = random_fixture(rng)
        loss, d_off, d_log = multibox_loss_and_grads(pred_offsets, pred_logits, assignments)
        if loss.n == 0:
            return
        eps = 1e-6
        for arr, grad in ((pred_offsets, d_off), (pred_logits, d_log)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            idx = rng.choice(flat.size, size=min(64, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = multibox_loss(pred_offsets, pred_logits, assignments).total
                flat[i] = orig - eps
                down = multibox_loss(pred_offsets, pred_logits, assignments).total
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                assert gflat[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)
