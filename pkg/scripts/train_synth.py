#!/usr/bin/env python3
"""Reference experiment: train the detector on the paper-shaped synthetic set
and report per-stage AP and mAP on the held-out split.

Usage: python scripts/train_synth.py [--iterations N] [--seed S] [--out DIR]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from etcdet import synth
from etcdet.detector import (
    MiniSSDConfig,
    TrainConfig,
    infer,
    save_checkpoint,
    train,
    training_set_from_manifest,
    write_loss_trace,
)
from etcdet.labels import BoundingBox, StageClass
from etcdet.metrics import GroundTruth, ScoredDetection, evaluate_detections, mean_ap, write_report


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=20240810)
    ap.add_argument("--out", type=Path, default=Path("runs/train_synth"))
    args = ap.parse_args()

    t0 = time.time()
    manifest, images = synth.gen_dataset((554, 650, 303), (112, 130, 70), seed=args.data_seed)
    train_set = training_set_from_manifest(manifest, images, "train")
    test_set = training_set_from_manifest(manifest, images, "test")
    print(f"dataset: {len(manifest.entries)} frames "
          f"({len(train_set)} train / {len(test_set)} test) in {time.time() - t0:.0f}s")

    cfg = TrainConfig(iterations=args.iterations, lr=3e-4, batch_size=5, alpha=1.0, seed=args.seed)
    t0 = time.time()
    result = train(train_set, MiniSSDConfig(seed=args.seed), cfg)
    trace = result.trace
    first = np.mean([r["total"] for r in trace[:100]])
    last = np.mean([r["total"] for r in trace[-100:]])
    print(f"train: {time.time() - t0:.0f}s, loss {first:.3f} -> {last:.3f} ({last / first:.1%})")

    dets, gts = [], []
    for i in range(len(test_set)):
        for row, c in zip(test_set.boxes[i], test_set.classes[i]):
            gts.append(GroundTruth(i, int(c), BoundingBox(*row)))
        for d in infer(result.model, test_set.images[i], score_threshold=0.05, top_k=100):
            dets.append(ScoredDetection(i, int(d.stage), d.box, d.score))
    results = evaluate_detections(dets, gts)
    for k, r in sorted(results.items()):
        print(f"  {StageClass(k).name:<11} AP {r.ap:.4f}  (gt {r.num_gt})")
    print(f"  mAP {mean_ap(results):.4f}")

    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "model.ckpt", result.model, cfg, result.rng_state)
    write_loss_trace(trace, args.out / "loss_trace.csv")
    write_report(results, args.out / "report.csv", 0.5, "all_point")
    print(f"wrote {args.out}/model.ckpt, loss_trace.csv, report.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
