"""Acceptance suite: one test per primary criterion, each printing a
[PASS] line (run with -s to see them). The scaled training criterion is the
slow one (a few minutes); everything else is seconds.
"""

import math
import time

import numpy as np
import pytest

from etcdet import synth
from etcdet.detector import (
    MiniSSDConfig,
    TrainConfig,
    infer,
    mine_hard_negatives,
    multibox_loss,
    multibox_loss_and_grads,
    train,
    training_set_from_manifest,
)
from etcdet.detector.matching import match_priors
from etcdet.detector.network import MiniSSD
from etcdet.detector.priors import center_to_corner, decode, encode
from etcdet.grid import EARTH_RADIUS_KM, LatLon, haversine_km
from etcdet.labels import (
    Annotation,
    AnnotationEvent,
    BoundingBox,
    IllegalTransition,
    MissingNote,
    ReviewState,
    SelfReview,
    StageClass,
    apply_review_action,
    export_dataset,
    import_dataset,
    split_train_test,
)
from etcdet.metrics import GroundTruth, ScoredDetection, average_precision, evaluate_detections, mean_ap, pr_curve
from etcdet.tracking import TrackerConfig, detect_centers, link_tracks

from test_grid import law_of_cosines_km
from test_loss import random_fixture, scalar_reference_loss
from test_metrics import oracle_ap, random_instance
from test_network import fixture_batch, reduced_config


# ---------------------------------------------------------------------------
# Criterion 1: tracker closed loop on 20 randomized synthetic series
# ---------------------------------------------------------------------------

N_LON, N_LAT = 144, 73
MIN_ROW, MAX_ROW = 6, 26  # lat 75 .. 25 degrees north


def _separated(cell, frame, plants, min_deg=15.0):
    p = synth.cell_position(*cell)
    for cells, start in plants:
        k = frame - start
        if 0 <= k < len(cells):
            if synth.cell_position(*cells[k]) == p:
                return False
            from etcdet.grid import angular_separation_deg

            if angular_separation_deg(p, synth.cell_position(*cells[k])) < min_deg:
                return False
    return True


def _random_walk(rng, start_cell, length):
    """Axis-aligned single-cell steps; every step is within the 333.36 km budget."""
    cells = [start_cell]
    for _ in range(length - 1):
        i, j = cells[-1]
        moves = [(0, 0), (0, 1), (0, -1)]
        if i > MIN_ROW:
            moves.append((-1, 0))
        if i < MAX_ROW:
            moves.append((1, 0))
        di, dj = moves[int(rng.integers(len(moves)))]
        cells.append((i + di, (j + dj) % N_LON))
    return cells


def _place_valid_plant(rng, n_frames, plants):
    for _ in range(60):
        length = int(rng.integers(4, n_frames + 1))
        start = int(rng.integers(0, n_frames - length + 1))
        cell0 = (int(rng.integers(MIN_ROW, MAX_ROW + 1)), int(rng.integers(0, N_LON)))
        cells = _random_walk(rng, cell0, length)
        if all(_separated(c, start + k, plants) for k, c in enumerate(cells)):
            return cells, start
    raise RuntimeError("could not place a valid plant")


def build_series(seed):
    """Two compliant plants plus one deliberate violation per series."""
    rng = np.random.default_rng(seed)
    n_frames = 8
    plants = []  # (cells, start_frame) of compliant lows
    for _ in range(2):
        plants.append(_place_valid_plant(rng, n_frames, plants))

    lows = [
        synth.PlantedLow(synth.path_on_cells(c, start), depth=2500.0, radius_deg=3.0)
        for c, start in plants
    ]
    kind = ("speed", "duration", "spacing")[seed % 3]
    violated_cells = None
    if kind == "speed":
        # jump of two latitude rows (5 deg, ~556 km) splits the life into
        # sub-chains both shorter than min_frames
        for _ in range(60):
            cell0 = (int(rng.integers(MIN_ROW, MAX_ROW - 2)), int(rng.integers(0, N_LON)))
            cells = [cell0, cell0, (cell0[0] + 2, cell0[1]), (cell0[0] + 2, cell0[1])]
            if all(_separated(c, k, plants) for k, c in enumerate(cells)):
                break
        lows.append(synth.PlantedLow(synth.path_on_cells(cells), depth=2500.0, radius_deg=3.0))
        violated_cells = set((k, c) for k, c in enumerate(cells))
    elif kind == "duration":
        for _ in range(60):
            cell0 = (int(rng.integers(MIN_ROW, MAX_ROW + 1)), int(rng.integers(0, N_LON)))
            cells = [cell0] * 3
            if all(_separated(c, k, plants) for k, c in enumerate(cells)):
                break
        lows.append(synth.PlantedLow(synth.path_on_cells(cells), depth=2500.0, radius_deg=3.0))
        violated_cells = set((k, c) for k, c in enumerate(cells))
    else:
        # a shallow neighbor a few degrees east of a deep low: close enough to
        # violate the 10-degree rule (so it is suppressed every frame), far
        # enough that the grid minima stay distinct cells
        from etcdet.grid import angular_separation_deg

        for _ in range(200):
            i0 = int(rng.integers(18, MAX_ROW + 1))  # low latitudes: lon arcs stay wide
            j0 = int(rng.integers(0, N_LON))
            dj = int(rng.integers(3, 5))
            sep = angular_separation_deg(
                synth.cell_position(i0, j0), synth.cell_position(i0, j0 + dj)
            )
            if not 5.5 <= sep <= 8.5:
                continue
            deep = [(i0, (j0 + t) % N_LON) for t in range(5)]
            shallow = [(i0, (j0 + dj + t) % N_LON) for t in range(5)]
            if all(
                _separated(c, k, plants) for k, c in enumerate(deep)
            ) and all(_separated(c, k, plants, min_deg=25.0) for k, c in enumerate(shallow)):
                break
        lows.append(synth.PlantedLow(synth.path_on_cells(deep), depth=3000.0, radius_deg=1.5))
        lows.append(synth.PlantedLow(synth.path_on_cells(shallow), depth=1500.0, radius_deg=1.5))
        plants.append((deep, 0))  # the deep one is itself compliant
        violated_cells = set((k, c) for k, c in enumerate(shallow))
    return lows, plants, violated_cells, n_frames


def test_tracker_closed_loop():
    t0 = time.time()
    cfg = TrackerConfig()
    for seed in range(20):
        lows, plants, violated_cells, n_frames = build_series(seed)
        series = synth.gen_mslp_series(lows, n_frames=n_frames, seed=seed)
        tracks = link_tracks(detect_centers(list(series.frames), cfg), cfg)

        expected = {
            tuple((start + k, c) for k, c in enumerate(cells)) for cells, start in plants
        }
        got = {tuple((c.frame_index, c.cell) for c in t.centers) for t in tracks}
        assert got == expected, f"seed {seed}: tracks do not match the plants"
        for t in tracks:
            for c in t.centers:
                assert (c.frame_index, c.cell) not in violated_cells, (
                    f"seed {seed}: a violating low leaked into a track"
                )
    elapsed = time.time() - t0
    assert elapsed < 10.0, f"closed loop took {elapsed:.1f}s"
    print(f"\n[PASS] tracker closed loop: 20 series, exact recovery, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 2: multibox loss equals the scalar reference
# ---------------------------------------------------------------------------

def test_loss_scalar_oracle():
    rng = np.random.default_rng(77)
    nonzero = 0
    for _ in range(100):
        pred_offsets, pred_logits, assignments = random_fixture(rng)
        got = multibox_loss(pred_offsets, pred_logits, assignments)
        conf, loc, total = scalar_reference_loss(pred_offsets, pred_logits, assignments)
        if got.n == 0:
            assert got.total == 0.0 == total
            assert got.conf == 0.0 and got.loc == 0.0
        else:
            assert abs(got.total - total) <= 1e-9 * max(1.0, abs(total))
            nonzero += 1
    assert nonzero >= 60
    # explicit N = 0 case
    priors = np.array([[0.5, 0.5, 0.2, 0.2]])
    empty = match_priors(priors, np.zeros((0, 4)), np.zeros(0, dtype=int))
    loss = multibox_loss(np.zeros((1, 1, 4)), np.ones((1, 1, 4)), [empty])
    assert loss.total == 0.0 and loss.n == 0
    print(f"\n[PASS] loss oracle: {nonzero} nonzero fixtures within 1e-9 relative, N=0 exact")


# ---------------------------------------------------------------------------
# Criterion 3: gradient check on the reduced model
# ---------------------------------------------------------------------------

def test_gradient_check():
    t0 = time.time()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        model = MiniSSD(reduced_config(seed=seed, dtype="float64"))
        images, gts, classes = fixture_batch(rng)
        assignments = [match_priors(model.priors, g, c) for g, c in zip(gts, classes)]
        offsets, logits = model.forward(images)
        negatives = mine_hard_negatives(logits, assignments)
        _, d_off, d_log = multibox_loss_and_grads(offsets, logits, assignments, negatives=negatives)
        model.zero_grad()
        model.backward(d_off, d_log)
        analytic = {k: v.copy() for k, v in model.gradients().items()}

        eps = 1e-3
        for name, param in model.parameters().items():
            flat = param.reshape(-1)
            fd = np.zeros(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                o, l = model.forward(images)
                up = multibox_loss(o, l, assignments, negatives=negatives).total
                flat[i] = orig - eps
                o, l = model.forward(images)
                down = multibox_loss(o, l, assignments, negatives=negatives).total
                flat[i] = orig
                fd[i] = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)
            rel = np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd), 1e-12)
            assert rel < 1e-4, f"seed {seed} {name}: relative error {rel:.2e}"
            worst = max(worst, rel)
    elapsed = time.time() - t0
    assert elapsed < 120.0, f"gradient check took {elapsed:.0f}s"
    print(f"\n[PASS] gradient check: 5 fixtures, worst tensor error {worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# Criterion 4: AP oracle
# ---------------------------------------------------------------------------

def test_map_oracle():
    for seed in range(200):
        dets, gts = random_instance(seed)
        got = average_precision(pr_curve(dets, gts), len(gts))
        assert got == pytest.approx(oracle_ap(dets, gts), abs=1e-12), f"seed {seed}"

    gts = [
        GroundTruth(0, 0, BoundingBox(0.1, 0.1, 0.3, 0.3)),
        GroundTruth(0, 0, BoundingBox(0.6, 0.6, 0.9, 0.9)),
    ]
    dets = [
        ScoredDetection(0, 0, BoundingBox(0.1, 0.1, 0.3, 0.3), 0.9),
        ScoredDetection(0, 0, BoundingBox(0.35, 0.4, 0.5, 0.55), 0.8),
        ScoredDetection(0, 0, BoundingBox(0.6, 0.6, 0.9, 0.9), 0.7),
    ]
    ap = average_precision(pr_curve(dets, gts), 2)
    assert ap == pytest.approx(5.0 / 6.0, abs=1e-9)
    print(f"\n[PASS] mAP oracle: 200 small instances exact, hand case {ap:.6f}")


# ---------------------------------------------------------------------------
# Criterion 5: scaled training on the paper-shaped synthetic set
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_scaled_training():
    t0 = time.time()
    manifest, images = synth.gen_dataset((554, 650, 303), (112, 130, 70), seed=20240810)
    train_set = training_set_from_manifest(manifest, images, "train")
    test_set = training_set_from_manifest(manifest, images, "test")
    assert len(train_set) + len(test_set) == len(manifest.entries)

    cfg = TrainConfig(iterations=2000, lr=3e-4, batch_size=5, alpha=1.0, seed=0)
    result = train(train_set, MiniSSDConfig(seed=0), cfg)

    trace = result.trace
    first = float(np.mean([r["total"] for r in trace[:100]]))
    last = float(np.mean([r["total"] for r in trace[-100:]]))
    # threshold frozen from the reference run of this exact configuration
    assert last < 0.85 * first, f"loss did not drop: {first:.2f} -> {last:.2f}"

    dets, gts = [], []
    for i in range(len(test_set)):
        for row, c in zip(test_set.boxes[i], test_set.classes[i]):
            gts.append(GroundTruth(i, int(c), BoundingBox(*row)))
        for d in infer(result.model, test_set.images[i], score_threshold=0.05, top_k=100):
            dets.append(ScoredDetection(i, int(d.stage), d.box, d.score))
    results = evaluate_detections(dets, gts, iou_threshold=0.5)
    m = mean_ap(results)
    ap = {StageClass(k): r.ap for k, r in results.items()}
    elapsed = time.time() - t0

    assert m >= 0.70, f"test mAP@0.5 = {m:.4f} < 0.70"
    assert ap[StageClass.MATURE] >= ap[StageClass.DEVELOPING] >= ap[StageClass.DECLINING], (
        f"qualitative ordering violated: {ap}"
    )
    assert elapsed <= 15 * 60, f"scaled training took {elapsed:.0f}s"
    print(
        f"\n[PASS] scaled training: mAP {m:.4f} "
        f"(mature {ap[StageClass.MATURE]:.3f} >= developing {ap[StageClass.DEVELOPING]:.3f} "
        f">= declining {ap[StageClass.DECLINING]:.3f}), loss {first:.2f}->{last:.2f}, {elapsed:.0f}s"
    )


# ---------------------------------------------------------------------------
# Criterion 6: codec round trip, haversine oracle, export identity, split shape
# ---------------------------------------------------------------------------

def test_codec_geometry_and_dataset_roundtrips(tmp_path):
    # encode/decode round trip within 1e-9
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(500):
        prior = np.array([
            rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
            rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4),
        ])
        gt_cs = np.array([
            rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
            rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4),
        ])
        gt = center_to_corner(gt_cs)
        worst = max(worst, float(np.abs(decode(encode(gt, prior), prior) - gt).max()))
    assert worst <= 1e-9

    # haversine vs the independently coded law-of-cosines oracle
    for _ in range(50):
        a = LatLon(float(rng.uniform(-89, 89)), float(rng.uniform(0, 360)))
        b = LatLon(float(rng.uniform(-89, 89)), float(rng.uniform(0, 360)))
        assert abs(haversine_km(a, b) - law_of_cosines_km(a, b)) <= 0.1

    # dataset export -> import identity
    manifest, images = synth.gen_dataset((5, 6, 4), (2, 2, 1), seed=9)
    export_dataset(manifest, images, tmp_path)
    assert import_dataset(tmp_path, seed=9) == manifest

    # split determinism and the Table 3 shape: 1507 train / 300 test entries
    frames = {i: [(BoundingBox(0.1, 0.1, 0.5, 0.5), StageClass.MATURE)] for i in range(1807)}
    m1 = split_train_test(frames, ratio=300 / 1807, seed=42)
    m2 = split_train_test(frames, ratio=300 / 1807, seed=42)
    assert m1 == m2
    assert len(m1.frames("test")) == 300
    assert len(m1.frames("train")) == 1507
    # the 20%-of-1507 reading gives the rounded 301 deterministically
    m3 = split_train_test({i: frames[i] for i in range(1507)}, ratio=0.2, seed=42)
    assert len(m3.frames("test")) == round(0.2 * 1507) == 301
    print(f"\n[PASS] codec/geometry/dataset: encode-decode {worst:.1e}, "
          "haversine oracle <= 0.1 km, export identity, split 1507/300")


# ---------------------------------------------------------------------------
# Criterion 7: review state machine, exhaustively
# ---------------------------------------------------------------------------

LEGAL = {
    ("draft", "submit"): "submitted",
    ("submitted", "suggest"): "suggested",
    ("submitted", "accept"): "consensus",
    ("suggested", "accept"): "consensus",
    ("suggested", "dispute"): "disputed",
    ("disputed", "resolve"): "consensus",
}


def annotation_in(state: ReviewState, annotator="alice"):
    return Annotation(
        id="a0",
        frame_index=0,
        box=BoundingBox(0.1, 0.1, 0.5, 0.5),
        stage=StageClass.MATURE,
        annotator=annotator,
        review=state,
        history=(AnnotationEvent("", annotator, "create", {}),),
    )


def test_review_state_machine_exhaustive():
    actions = ("submit", "suggest", "accept", "dispute", "resolve")
    checked = 0
    for state in ReviewState:
        for action in actions:
            for actor in ("alice", "bob"):  # alice is the original annotator
                ann = annotation_in(state)
                expected = LEGAL.get((state.value, action))
                needs_second = action in ("suggest", "accept")
                should_pass = expected is not None and not (needs_second and actor == "alice")
                try:
                    out = apply_review_action(ann, action, actor, note="discussed")
                    ok = True
                except (IllegalTransition, SelfReview, MissingNote):
                    ok = False
                assert ok == should_pass, f"({state.value}, {action}, {actor})"
                if ok:
                    assert out.review.value == expected
                checked += 1
    assert checked == 50

    # no consensus with a single distinct actor, over randomized action walks
    rng = np.random.default_rng(1)
    for _ in range(300):
        ann = annotation_in(ReviewState.DRAFT)
        for _ in range(6):
            action = actions[int(rng.integers(len(actions)))]
            actor = ("alice", "bob", "carol")[int(rng.integers(3))]
            try:
                ann = apply_review_action(ann, action, actor, note="n")
            except (IllegalTransition, SelfReview, MissingNote):
                continue
        if ann.review == ReviewState.CONSENSUS:
            assert len(ann.distinct_actors) >= 2
    print(f"\n[PASS] review machine: 50 (state, action, role) triples match the table; "
          "no single-actor consensus in 300 walks")
