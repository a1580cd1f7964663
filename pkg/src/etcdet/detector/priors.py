"""Prior (template) boxes tiled over the detector's feature maps, plus the
center-size offset codec used for localization targets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# offset variances: (cx, cy, w, h)
VARIANCES = (0.1, 0.1, 0.2, 0.2)


@dataclass(frozen=True)
class PriorBox:
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class PriorConfig:
    feature_map_sizes: tuple[int, ...] = (18, 9, 5, 3)
    scales: tuple[float, ...] = (0.15, 0.35, 0.55, 0.75)
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    clip: bool = True

    def __post_init__(self):
        if len(self.feature_map_sizes) != len(self.scales):
            raise ValueError("feature_map_sizes and scales must align")
        if any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ValueError("scales must lie in (0, 1]")
        if list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be increasing")
        if any(ar <= 0 for ar in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")

    @property
    def n_priors(self) -> int:
        return sum(s * s * len(self.aspect_ratios) for s in self.feature_map_sizes)


def generate_priors(cfg: PriorConfig) -> np.ndarray:
    """All priors in center-size form, shape (P, 4).

    Ordering is map-major, then row-major over cells, then aspect ratio —
    the same ordering the detection heads emit.
    """
    rows = []
    for s, scale in zip(cfg.feature_map_sizes, cfg.scales):
        for i in range(s):
            for j in range(s):
                cx = (j + 0.5) / s
                cy = (i + 0.5) / s
                for ar in cfg.aspect_ratios:
                    rows.append((cx, cy, scale * math.sqrt(ar), scale / math.sqrt(ar)))
    priors = np.asarray(rows, dtype=np.float64)
    if cfg.clip:
        corners = np.clip(center_to_corner(priors), 0.0, 1.0)
        priors = corner_to_center(corners)
    return priors


def priors_as_boxes(cfg: PriorConfig) -> list[PriorBox]:
    return [PriorBox(*row) for row in generate_priors(cfg)]


def center_to_corner(cs: np.ndarray) -> np.ndarray:
    cs = np.asarray(cs, dtype=np.float64)
    half = cs[..., 2:] / 2.0
    return np.concatenate([cs[..., :2] - half, cs[..., :2] + half], axis=-1)


def corner_to_center(corners: np.ndarray) -> np.ndarray:
    corners = np.asarray(corners, dtype=np.float64)
    wh = corners[..., 2:] - corners[..., :2]
    return np.concatenate([corners[..., :2] + wh / 2.0, wh], axis=-1)


def encode(gt_corners: np.ndarray, priors_cs: np.ndarray) -> np.ndarray:
    """Offsets (t_cx, t_cy, t_w, t_h) that map the prior onto the ground truth."""
    gt = corner_to_center(gt_corners)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    p = np.asarray(priors_cs, dtype=np.float64)
    t_xy = (gt[..., :2] - p[..., :2]) / (p[..., 2:] * VARIANCES[0])
    t_wh = np.log(gt[..., 2:] / p[..., 2:]) / VARIANCES[2]
    return np.concatenate([t_xy, t_wh], axis=-1)


def decode(offsets: np.ndarray, priors_cs: np.ndarray) -> np.ndarray:
    """Exact inverse of encode; returns corner-form boxes."""
    t = np.asarray(offsets, dtype=np.float64)
    p = np.asarray(priors_cs, dtype=np.float64)
    xy = t[..., :2] * VARIANCES[0] * p[..., 2:] + p[..., :2]
    wh = np.exp(t[..., 2:] * VARIANCES[2]) * p[..., 2:]
    return center_to_corner(np.concatenate([xy, wh], axis=-1))
