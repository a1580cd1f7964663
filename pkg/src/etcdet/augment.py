"""Training-time preprocessing: photometric jitter, SSD-style crops, mirroring, resize.

All transforms are pure given an explicit numpy Generator; seeding the
generator makes the whole chain reproducible. Boxes stay in normalized
coordinates except through the explicit to_absolute/to_relative pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imageops import bilinear_resize
from .labels import BoundingBox, StageClass

# 0.0 in the min-IoU choice set means "any overlap", per the SSD crop recipe.
CROP_ANY = 0.0


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (H, W) intensities in [0, 1]
    boxes: tuple[tuple[BoundingBox, StageClass], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
        object.__setattr__(self, "image", img)


@dataclass(frozen=True)
class AbsoluteSample:
    """Sample with boxes in pixel coordinates; produced by to_absolute."""

    image: np.ndarray
    boxes: tuple[tuple[tuple[float, float, float, float], StageClass], ...] = ()


@dataclass(frozen=True)
class AugmentConfig:
    brightness_delta: float = 0.125
    contrast_range: tuple[float, float] = (0.5, 1.5)
    crop_min_iou: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9, CROP_ANY)
    crop_scale_range: tuple[float, float] = (0.3, 1.0)
    crop_aspect_range: tuple[float, float] = (0.5, 2.0)
    crop_attempts: int = 50
    mirror_prob: float = 0.5
    output_size: int = 300

    def __post_init__(self):
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError("mirror_prob must be a probability")
        if self.output_size <= 0:
            raise ValueError("output_size must be positive")
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be non-negative")


def photometric_distort(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random contrast scale and brightness shift, clamped to [0, 1]; geometry untouched."""
    contrast = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1])
    delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    image = np.clip(sample.image * contrast + delta, 0.0, 1.0)
    return Sample(image, sample.boxes)


def to_absolute(sample: Sample) -> AbsoluteSample:
    h, w = sample.image.shape
    boxes = tuple(
        ((b.xmin * w, b.ymin * h, b.xmax * w, b.ymax * h), s) for b, s in sample.boxes
    )
    return AbsoluteSample(sample.image, boxes)


def to_relative(abs_sample: AbsoluteSample) -> Sample:
    h, w = abs_sample.image.shape
    boxes = tuple(
        (BoundingBox(x0 / w, y0 / h, x1 / w, y1 / h), s) for (x0, y0, x1, y1), s in abs_sample.boxes
    )
    return Sample(abs_sample.image, boxes)


def _window_iou(window: tuple[float, float, float, float], box: BoundingBox) -> float:
    wx0, wy0, wx1, wy1 = window
    ix0, iy0 = max(wx0, box.xmin), max(wy0, box.ymin)
    ix1, iy1 = min(wx1, box.xmax), min(wy1, box.ymax)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = (wx1 - wx0) * (wy1 - wy0) + box.area - inter
    return inter / union if union > 0 else 0.0


def random_crop(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """SSD-style random sample crop.

    Each attempt draws a min-IoU mode and a window; the window must reach that
    IoU with at least one box, and a box survives iff its center lies inside
    the window. Surviving boxes are clipped to the window and renormalized.
    After the attempt budget the sample is returned unchanged.
    """
    if not sample.boxes:
        return sample
    h, w = sample.image.shape
    for _ in range(cfg.crop_attempts):
        min_iou = cfg.crop_min_iou[rng.integers(len(cfg.crop_min_iou))]
        ww = rng.uniform(cfg.crop_scale_range[0], cfg.crop_scale_range[1])
        wh = rng.uniform(cfg.crop_scale_range[0], cfg.crop_scale_range[1])
        aspect = wh / ww
        if not cfg.crop_aspect_range[0] <= aspect <= cfg.crop_aspect_range[1]:
            continue
        wx0 = rng.uniform(0.0, 1.0 - ww)
        wy0 = rng.uniform(0.0, 1.0 - wh)
        window = (wx0, wy0, wx0 + ww, wy0 + wh)
        if max(_window_iou(window, b) for b, _ in sample.boxes) < min_iou:
            continue
        # integer pixel window is the actual crop; renormalize against it
        px0, px1 = int(round(wx0 * w)), int(round((wx0 + ww) * w))
        py0, py1 = int(round(wy0 * h)), int(round((wy0 + wh) * h))
        px1, py1 = max(px1, px0 + 1), max(py1, py0 + 1)
        kept = []
        for b, s in sample.boxes:
            cx, cy = (b.xmin + b.xmax) / 2 * w, (b.ymin + b.ymax) / 2 * h
            if not (px0 <= cx < px1 and py0 <= cy < py1):
                continue
            nx0 = (max(b.xmin * w, px0) - px0) / (px1 - px0)
            ny0 = (max(b.ymin * h, py0) - py0) / (py1 - py0)
            nx1 = (min(b.xmax * w, px1) - px0) / (px1 - px0)
            ny1 = (min(b.ymax * h, py1) - py0) / (py1 - py0)
            if nx1 - nx0 <= 1e-9 or ny1 - ny0 <= 1e-9:
                continue
            kept.append((BoundingBox(nx0, ny0, nx1, ny1), s))
        if kept:
            return Sample(sample.image[py0:py1, px0:px1], tuple(kept))
    return sample


def mirror(sample: Sample, rng: np.random.Generator, prob: float = 0.5) -> Sample:
    """Horizontal flip with the given probability."""
    if rng.uniform() >= prob:
        return sample
    boxes = tuple(
        (BoundingBox(1.0 - b.xmax, b.ymin, 1.0 - b.xmin, b.ymax), s) for b, s in sample.boxes
    )
    return Sample(sample.image[:, ::-1], boxes)


def resize(sample: Sample, output_size: int) -> Sample:
    """Bilinear resize to a square canvas; normalized boxes are unchanged."""
    image = bilinear_resize(sample.image, output_size, output_size)
    return Sample(image, sample.boxes)


def augment_sample(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """The full training chain: photometric -> crop -> mirror -> resize."""
    out = photometric_distort(sample, cfg, rng)
    out = random_crop(out, cfg, rng)
    out = mirror(out, rng, cfg.mirror_prob)
    return resize(out, cfg.output_size)
