"""SGD training over an exported detection dataset, with the augmentation
chain applied per sample and a per-iteration loss trace."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from ..augment import AugmentConfig, Sample, augment_sample
from ..imageops import bilinear_resize
from ..labels import BoundingBox, DatasetManifest, StageClass
from .loss import multibox_loss_and_grads
from .matching import match_priors
from .network import MiniSSD, MiniSSDConfig


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 3e-4
    batch_size: int = 5
    alpha: float = 1.0
    neg_pos_ratio: int = 3
    iou_threshold: float = 0.5
    seed: int = 0
    log_every: int = 100
    calibrate_init: bool = True  # data-dependent init for freshly built models

    def __post_init__(self):
        if self.iterations <= 0 or self.batch_size <= 0 or self.lr < 0:
            raise ValueError("iterations and batch_size must be positive, lr non-negative")


@dataclass
class TrainingSet:
    images: list[np.ndarray]  # (H, W) intensities in [0, 1]
    boxes: list[np.ndarray]  # (G, 4) normalized corner boxes per image
    classes: list[np.ndarray]  # (G,) stage codes per image

    def __len__(self) -> int:
        return len(self.images)


def training_set_from_manifest(
    manifest: DatasetManifest, images: Mapping[int, np.ndarray], split: str = "train"
) -> TrainingSet:
    out = TrainingSet([], [], [])
    for entry in manifest.frames(split):
        img = np.asarray(images[entry.frame], dtype=np.float64)
        if img.dtype != np.float64 or img.max() > 1.0:
            img = img / 255.0
        out.images.append(img)
        out.boxes.append(np.array([b.as_tuple() for b, _ in entry.boxes], dtype=np.float64).reshape(-1, 4))
        out.classes.append(np.array([int(s) for _, s in entry.boxes], dtype=np.int64))
    return out


def _sample_to_arrays(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.array([b.as_tuple() for b, _ in sample.boxes], dtype=np.float64).reshape(-1, 4)
    classes = np.array([int(s) for _, s in sample.boxes], dtype=np.int64)
    return boxes, classes


@dataclass
class TrainResult:
    model: MiniSSD
    trace: list[dict]
    rng_state: dict  # sampling/augmentation stream state after the last step


def train(
    dataset: TrainingSet,
    model: MiniSSD | MiniSSDConfig | None = None,
    cfg: TrainConfig = TrainConfig(),
    augment_cfg: AugmentConfig | None = None,
    rng_state: dict | None = None,
) -> TrainResult:
    """Run the loop and return the model, the per-iteration loss trace, and the
    final RNG state (so a checkpointed run can resume bit-exactly)."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    fresh = not isinstance(model, MiniSSD)
    if model is None:
        model = MiniSSD(MiniSSDConfig())
    elif isinstance(model, MiniSSDConfig):
        model = MiniSSD(model)
    if augment_cfg is None:
        augment_cfg = AugmentConfig(output_size=model.config.input_size)
    if fresh and cfg.calibrate_init:
        size = model.config.input_size
        batch = np.stack(
            [
                bilinear_resize(img, size, size)
                for img in dataset.images[: min(8, len(dataset))]
            ]
        )
        model.calibrate(batch)
    rng = np.random.default_rng(cfg.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state

    trace = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch_images = np.empty(
            (cfg.batch_size, model.config.input_size, model.config.input_size), dtype=np.float64
        )
        assignments = []
        for slot, i in enumerate(idx):
            boxes = [
                (BoundingBox(*row), StageClass(int(c)))
                for row, c in zip(dataset.boxes[i], dataset.classes[i])
            ]
            sample = augment_sample(Sample(dataset.images[i], tuple(boxes)), augment_cfg, rng)
            batch_images[slot] = sample.image
            b_arr, c_arr = _sample_to_arrays(sample)
            assignments.append(
                match_priors(model.priors, b_arr, c_arr, iou_threshold=cfg.iou_threshold)
            )
        offsets, logits = model.forward(batch_images)
        loss, d_off, d_log = multibox_loss_and_grads(
            offsets, logits, assignments, alpha=cfg.alpha, neg_pos_ratio=cfg.neg_pos_ratio
        )
        if not np.isfinite(loss.total):
            raise RuntimeError(
                f"non-finite loss at iteration {it}: conf={loss.conf}, loc={loss.loc}, n={loss.n}"
            )
        model.zero_grad()
        model.backward(d_off.astype(model.dtype), d_log.astype(model.dtype))
        model.sgd_step(cfg.lr)
        trace.append({"iteration": it, "conf": loss.conf, "loc": loss.loc, "total": loss.total})
    return TrainResult(model, trace, rng.bit_generator.state)


def write_loss_trace(trace: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "conf", "loc", "total"])
        writer.writeheader()
        writer.writerows(trace)
