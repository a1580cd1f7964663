"""Deterministic synthetic data: MSLP series with planted lows, and stage-styled
cyclone images with ground-truth boxes.

The MSLP generator plants Gaussian depressions (in angular distance, so the
minimum cell is known in closed form) on a uniform ambient field. The image
generator draws three parametric cloud morphologies on a 300x300 canvas:
a compact blob for developing systems, a spiral arm with a long tail (the
"9" glyph) for mature ones, and a fragmented, blurred, tail-less spiral for
declining ones. Everything is reproducible bit-for-bit from its seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .grid import STEP_SECONDS, FieldKind, FrameSeries, GeoGrid, LatLon, angular_separation_deg
from .imageops import bilinear_resize, gaussian_blur
from .labels import BoundingBox, DatasetManifest, ManifestEntry, StageClass

CANVAS = 300
_PATCH = 160  # shapes are drawn on this canonical patch, then scaled into place


# ---------------------------------------------------------------------------
# MSLP series with planted lows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantedLow:
    """A moving depression: frame index -> position, Gaussian in angular distance."""

    positions: Mapping[int, LatLon]
    depth: float = 2000.0  # Pa below ambient at the center
    radius_deg: float = 4.0  # Gaussian sigma

    def __post_init__(self):
        if self.depth <= 0:
            raise ValueError("depth must be positive")
        if self.radius_deg <= 0:
            raise ValueError("radius_deg must be positive")
        object.__setattr__(self, "positions", dict(self.positions))


def global_geometry(n_lon: int = 144, n_lat: int = 73) -> tuple[float, float, float, float]:
    """(lat0, d_lat, lon0, d_lon) for a pole-to-pole global grid."""
    return (90.0, -180.0 / (n_lat - 1), 0.0, 360.0 / n_lon)


def cell_position(i_lat: int, i_lon: int, n_lon: int = 144, n_lat: int = 73) -> LatLon:
    lat0, d_lat, lon0, d_lon = global_geometry(n_lon, n_lat)
    return LatLon(lat0 + i_lat * d_lat, lon0 + (i_lon % n_lon) * d_lon)


def path_on_cells(cells: Iterable[tuple[int, int]], start_frame: int = 0, n_lon: int = 144, n_lat: int = 73) -> dict[int, LatLon]:
    """Frame->position mapping that lands exactly on grid cells."""
    return {
        start_frame + k: cell_position(i, j, n_lon, n_lat) for k, (i, j) in enumerate(cells)
    }


def gen_mslp_series(
    lows: Iterable[PlantedLow],
    n_frames: int,
    n_lon: int = 144,
    n_lat: int = 73,
    ambient: float = 101325.0,
    noise_amp: float = 0.0,
    seed: int = 0,
    t0: int = 0,
) -> FrameSeries:
    """Uniform ambient pressure minus one angular Gaussian per active low.

    Warns when two lows active in the same frame sit closer than the sum of
    their radii (their minima may merge on the grid).
    """
    lows = list(lows)
    lat0, d_lat, lon0, d_lon = global_geometry(n_lon, n_lat)
    lats = np.radians(lat0 + np.arange(n_lat) * d_lat)[:, None]
    lons = np.radians(lon0 + np.arange(n_lon) * d_lon)[None, :]
    rng = np.random.default_rng(seed)
    frames = []
    for f in range(n_frames):
        active = [(low, low.positions[f]) for low in lows if f in low.positions]
        for i in range(len(active)):
            for j in range(i + 1, len(active)):
                sep = angular_separation_deg(active[i][1], active[j][1])
                if sep < active[i][0].radius_deg + active[j][0].radius_deg:
                    warnings.warn(
                        f"frame {f}: planted lows {sep:.1f} deg apart are within 2 sigma; minima may merge"
                    )
        values = np.full((n_lat, n_lon), ambient, dtype=np.float64)
        for low, pos in active:
            phi = math.radians(pos.lat)
            lam = math.radians(pos.lon)
            s = np.sin((lats - phi) / 2) ** 2 + np.cos(lats) * math.cos(phi) * np.sin((lons - lam) / 2) ** 2
            d_deg = np.degrees(2.0 * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0))))
            values -= low.depth * np.exp(-(d_deg**2) / (2.0 * low.radius_deg**2))
        if noise_amp > 0:
            values += rng.uniform(-noise_amp, noise_amp, size=values.shape)
        frames.append(
            GeoGrid(n_lon, n_lat, lat0, d_lat, lon0, d_lon, t0 + f * STEP_SECONDS, FieldKind.MSLP, values)
        )
    return FrameSeries(tuple(frames))


# ---------------------------------------------------------------------------
# Stage-styled cyclone images
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthImageSpec:
    stage: StageClass
    center: tuple[float, float] = (0.5, 0.5)
    size: float = 0.5  # shape diameter relative to the canvas
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        cx, cy = self.center
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
            raise ValueError("center must lie in the unit square")
        if not 0.05 <= self.size <= 1.0:
            raise ValueError("size must be in [0.05, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def _unit_grid():
    c = (np.arange(_PATCH) + 0.5) / _PATCH * 2.0 - 1.0
    x = c[None, :]
    y = -c[:, None]  # row 0 is the top of the patch
    return x, y


def _blob(x, y, cx, cy, sigma, peak):
    return peak * np.exp(-(((x - cx) ** 2 + (y - cy) ** 2)) / (2.0 * sigma**2))


def _curve_layer(pts: np.ndarray, width: float, peak: float) -> np.ndarray:
    """Splat curve points into the patch and blur them into a tube of ~width sigma."""
    acc = np.zeros((_PATCH, _PATCH))
    px = (pts[:, 0] + 1.0) / 2.0 * (_PATCH - 1)
    py = (1.0 - pts[:, 1]) / 2.0 * (_PATCH - 1)
    x0 = np.clip(np.floor(px).astype(int), 0, _PATCH - 2)
    y0 = np.clip(np.floor(py).astype(int), 0, _PATCH - 2)
    fx, fy = px - x0, py - y0
    np.add.at(acc, (y0, x0), (1 - fx) * (1 - fy))
    np.add.at(acc, (y0, x0 + 1), fx * (1 - fy))
    np.add.at(acc, (y0 + 1, x0), (1 - fx) * fy)
    np.add.at(acc, (y0 + 1, x0 + 1), fx * fy)
    layer = gaussian_blur(acc, width * _PATCH / 2.0)
    m = layer.max()
    return layer * (peak / m) if m > 0 else layer


def _spiral_points(a: float, b: float, theta_max: float, center=(0.0, 0.0), n: int = 500) -> np.ndarray:
    theta = np.linspace(0.0, theta_max, n)
    rho = a * np.exp(b * theta)
    return np.stack([center[0] + rho * np.cos(theta), center[1] + rho * np.sin(theta)], axis=1)


def _arc_points(radius: float, t0: float, t1: float, center=(0.0, 0.0), n: int = 240) -> np.ndarray:
    theta = np.linspace(t0, t1, n)
    return np.stack(
        [center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)], axis=1
    )


def _render_patch(stage: StageClass, rng: np.random.Generator) -> np.ndarray:
    x, y = _unit_grid()
    if stage == StageClass.DEVELOPING:
        # concentrated around the center, no spiral; noticeably more variable
        # and less pronounced than the mature glyph
        cx, cy = rng.uniform(-0.12, 0.12, 2)
        patch = _blob(x, y, cx, cy, rng.uniform(0.24, 0.34), rng.uniform(0.75, 1.0))
        if rng.uniform() < 0.7:
            patch = np.maximum(
                patch, _blob(x, y, cx + rng.uniform(0.15, 0.35), cy + rng.uniform(-0.1, 0.25),
                             rng.uniform(0.13, 0.2), rng.uniform(0.5, 0.75))
            )
        if rng.uniform() < 0.6:
            arc = _arc_points(rng.uniform(0.5, 0.65), math.pi * 0.6, math.pi * rng.uniform(1.0, 1.3))
            patch = np.maximum(patch, _curve_layer(arc, 0.05, rng.uniform(0.35, 0.55)))
    elif stage == StageClass.MATURE:
        spiral = _spiral_points(0.14, 0.24, 2.3 * math.pi, center=(0.0, 0.30))
        patch = _curve_layer(spiral, 0.12, 1.0)
        patch = np.maximum(patch, _blob(x, y, 0.0, 0.30, 0.16, 1.0))
        t = np.linspace(0.0, 1.0, 300)
        tail = np.stack([0.55 - 0.40 * t - 0.10 * t**2, 0.10 - 1.05 * t], axis=1)
        patch = np.maximum(patch, _curve_layer(tail, 0.09, 1.0))
    else:  # DECLINING: the cloud ring breaks into dim fragments; fragments sit
        # in jittered slots around the center so the coarse layout (and hence
        # template correlation) survives while every sample differs
        patch = np.zeros((_PATCH, _PATCH))
        n_slots = 6
        for k in range(n_slots):
            if rng.uniform() < 0.15:
                continue
            ang = 2.0 * math.pi * k / n_slots + rng.uniform(-0.25, 0.25)
            r = rng.uniform(0.5, 0.68)
            sigma = rng.uniform(0.1, 0.14)
            peak = rng.uniform(0.5, 0.75)
            patch = np.maximum(
                patch, _blob(x, y, r * math.cos(ang), r * math.sin(ang), sigma, peak)
            )
        patch = np.maximum(patch, _blob(x, y, 0.0, 0.0, rng.uniform(0.1, 0.14), rng.uniform(0.3, 0.45)))
        patch = gaussian_blur(patch, _PATCH * 0.015)
    return np.clip(patch, 0.0, 1.0)


def _place_shape(stage: StageClass, center: tuple[float, float], size: float, rng: np.random.Generator,
                 canvas_px: int = CANVAS) -> tuple[np.ndarray, BoundingBox]:
    """Render one shape onto an otherwise empty canvas and return its tight box."""
    patch = _render_patch(stage, rng)
    side = max(8, int(round(size * canvas_px)))
    scaled = bilinear_resize(patch, side, side)
    cx, cy = center[0] * canvas_px, center[1] * canvas_px
    x0, y0 = int(round(cx - side / 2)), int(round(cy - side / 2))
    sx0, sy0 = max(0, -x0), max(0, -y0)
    dx0, dy0 = max(0, x0), max(0, y0)
    dx1, dy1 = min(canvas_px, x0 + side), min(canvas_px, y0 + side)
    if dx1 <= dx0 or dy1 <= dy0:
        raise ValueError("shape placed fully outside the canvas")
    layer = np.zeros((canvas_px, canvas_px))
    layer[dy0:dy1, dx0:dx1] = scaled[sy0 : sy0 + (dy1 - dy0), sx0 : sx0 + (dx1 - dx0)]
    mask = layer > 0.05 * layer.max()
    if not mask.any():
        raise ValueError("shape placed fully outside the canvas")
    ys, xs = np.nonzero(mask)
    bx0, bx1 = xs.min() / canvas_px, (xs.max() + 1) / canvas_px
    by0, by1 = ys.min() / canvas_px, (ys.max() + 1) / canvas_px
    mx, my = 0.05 * (bx1 - bx0), 0.05 * (by1 - by0)
    box = BoundingBox(
        max(0.0, bx0 - mx), max(0.0, by0 - my), min(1.0, bx1 + mx), min(1.0, by1 + my)
    )
    return layer, box


def gen_cyclone_image(spec: SynthImageSpec) -> tuple[np.ndarray, BoundingBox, StageClass]:
    """One shape on a noisy canvas; returns (image in [0,1], tight box, stage)."""
    rng = np.random.default_rng(spec.seed)
    layer, box = _place_shape(spec.stage, spec.center, spec.size, rng)
    canvas = layer
    if spec.noise > 0:
        canvas = canvas + rng.uniform(0.0, spec.noise, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0), box, spec.stage


# ---------------------------------------------------------------------------
# Whole-dataset generation
# ---------------------------------------------------------------------------

MAX_BOX_IOU = 0.2


def _box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix0, iy0 = max(a.xmin, b.xmin), max(a.ymin, b.ymin)
    ix1, iy1 = min(a.xmax, b.xmax), min(a.ymax, b.ymax)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def gen_dataset(
    train_counts: tuple[int, int, int],
    test_counts: tuple[int, int, int] = (0, 0, 0),
    seed: int = 0,
    noise: float = 0.02,
    max_per_frame: int = 3,
) -> tuple[DatasetManifest, dict[int, np.ndarray]]:
    """Generate frames holding 1..3 non-overlapping cyclones until the per-class
    box quotas (developing, mature, declining) are met for each split.

    Returns the manifest plus uint8 images keyed by frame index. Placement is
    rejection-sampled to keep pairwise box IoU below 0.2; an overfull frame
    raises after the retry budget.
    """
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    images: dict[int, np.ndarray] = {}
    frame_idx = 0
    for split, counts in (("train", train_counts), ("test", test_counts)):
        remaining = {StageClass(i): int(c) for i, c in enumerate(counts)}
        if any(c < 0 for c in remaining.values()):
            raise ValueError("per-class counts must be non-negative")
        while sum(remaining.values()) > 0:
            total_left = sum(remaining.values())
            k = int(min(total_left, rng.integers(1, max_per_frame + 1)))
            pool = [s for s, c in remaining.items() for _ in range(c)]
            stages = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
            canvas = np.zeros((CANVAS, CANVAS))
            boxes: list[tuple[BoundingBox, StageClass]] = []
            for stage in stages:
                placed = False
                for _ in range(40):
                    size = float(rng.uniform(0.28, 0.52))
                    cx = float(rng.uniform(size * 0.45, 1.0 - size * 0.45))
                    cy = float(rng.uniform(size * 0.45, 1.0 - size * 0.45))
                    layer, box = _place_shape(stage, (cx, cy), size, rng)
                    if all(_box_iou(box, b) < MAX_BOX_IOU for b, _ in boxes):
                        canvas = np.maximum(canvas, layer)
                        boxes.append((box, stage))
                        placed = True
                        break
                if not placed:
                    raise RuntimeError(
                        f"could not place a {stage.wire_name} shape under the overlap bound"
                    )
                remaining[stage] -= 1
            if noise > 0:
                canvas = canvas + rng.uniform(0.0, noise, size=canvas.shape)
            canvas = np.clip(canvas, 0.0, 1.0)
            images[frame_idx] = np.rint(canvas * 255.0).astype(np.uint8)
            entries.append(ManifestEntry(frame_idx, tuple(boxes), split))
            frame_idx += 1
    return DatasetManifest(tuple(entries), seed=seed), images


# ---------------------------------------------------------------------------
# Fixed nearest-template classifier (the machine-distinguishability oracle)
# ---------------------------------------------------------------------------

_TEMPLATE_PX = 64
_template_cache: dict[StageClass, np.ndarray] = {}


def _normalized_crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    h, w = image.shape
    x0, x1 = int(box.xmin * w), max(int(box.xmin * w) + 2, int(math.ceil(box.xmax * w)))
    y0, y1 = int(box.ymin * h), max(int(box.ymin * h) + 2, int(math.ceil(box.ymax * h)))
    crop = bilinear_resize(np.asarray(image, dtype=np.float64)[y0:y1, x0:x1], _TEMPLATE_PX, _TEMPLATE_PX)
    crop = crop - crop.mean()
    norm = np.linalg.norm(crop)
    return crop / norm if norm > 0 else crop


def canonical_templates() -> dict[StageClass, np.ndarray]:
    """One normalized reference crop per stage, rendered at a fixed seed."""
    if not _template_cache:
        for stage in StageClass:
            rng = np.random.default_rng(12345 + int(stage))
            layer, box = _place_shape(stage, (0.5, 0.5), 0.6, rng)
            _template_cache[stage] = _normalized_crop(layer, box)
    return _template_cache


def nearest_template_stage(image: np.ndarray, box: BoundingBox) -> StageClass:
    """Classify the crop by maximum correlation with the canonical shapes."""
    crop = _normalized_crop(image, box)
    templates = canonical_templates()
    return max(templates, key=lambda s: float(np.sum(crop * templates[s])))
