"""Stage-classed box annotations, the two-expert review workflow, and dataset export.

Annotations live in an append-only JSON-Lines journal; the in-memory store is
a fold over that journal, so replaying a journal always reproduces the store.
Review moves through a five-state machine and reaches Consensus only after a
second expert has acted.
"""

from __future__ import annotations

import json
import threading
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .grid import GeoGrid, encode_png
from .tracking import CycloneCenter


class StageClass(IntEnum):
    DEVELOPING = 0
    MATURE = 1
    DECLINING = 2

    @property
    def wire_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "StageClass":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown stage {name!r}") from None


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        for name in ("xmin", "ymin", "xmax", "ymax"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (0.0 <= self.xmin < self.xmax <= 1.0 and 0.0 <= self.ymin < self.ymax <= 1.0):
            raise ValueError(
                f"invalid box ({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax}): "
                "need 0 <= min < max <= 1 on both axes"
            )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


class ReviewState(Enum):
    DRAFT = "draft"
    SUBMITTED = "submitted"
    SUGGESTED = "suggested"
    DISPUTED = "disputed"
    CONSENSUS = "consensus"


# (state, action) -> next state
TRANSITIONS: dict[tuple[ReviewState, str], ReviewState] = {
    (ReviewState.DRAFT, "submit"): ReviewState.SUBMITTED,
    (ReviewState.SUBMITTED, "suggest"): ReviewState.SUGGESTED,
    (ReviewState.SUBMITTED, "accept"): ReviewState.CONSENSUS,
    (ReviewState.SUGGESTED, "accept"): ReviewState.CONSENSUS,
    (ReviewState.SUGGESTED, "dispute"): ReviewState.DISPUTED,
    (ReviewState.DISPUTED, "resolve"): ReviewState.CONSENSUS,
}

REVIEW_ACTIONS = ("submit", "suggest", "accept", "dispute", "resolve")
SECOND_EXPERT_ACTIONS = frozenset({"suggest", "accept"})


class ReviewError(ValueError):
    pass


class IllegalTransition(ReviewError):
    pass


class SelfReview(ReviewError):
    pass


class MissingNote(ReviewError):
    pass


@dataclass(frozen=True)
class AnnotationEvent:
    ts: str
    actor: str
    action: str
    payload: Mapping


@dataclass(frozen=True)
class Annotation:
    id: str
    frame_index: int
    box: BoundingBox
    stage: StageClass
    annotator: str
    review: ReviewState = ReviewState.DRAFT
    track_id: str | None = None
    history: tuple[AnnotationEvent, ...] = ()

    @property
    def distinct_actors(self) -> set[str]:
        return {e.actor for e in self.history}


def apply_review_action(ann: Annotation, action: str, actor: str, note: str = "", ts: str = "") -> Annotation:
    """Pure transition: returns the annotation in its new state with the event appended."""
    if action not in REVIEW_ACTIONS:
        raise IllegalTransition(f"unknown review action {action!r}")
    nxt = TRANSITIONS.get((ann.review, action))
    if nxt is None:
        raise IllegalTransition(f"{action} is not legal from state {ann.review.value}")
    if action in SECOND_EXPERT_ACTIONS and actor == ann.annotator:
        raise SelfReview(f"{action} requires a second expert (actor {actor!r} is the annotator)")
    if action == "resolve" and not note.strip():
        raise MissingNote("resolve requires a discussion note")
    event = AnnotationEvent(ts=ts, actor=actor, action=action, payload={"note": note} if note else {})
    return replace(ann, review=nxt, history=ann.history + (event,))


class LabelStore:
    """Journal-backed annotation store with a single serialized writer.

    Every mutation appends one journal record and bumps `version`; opening a
    store replays its journal through the same fold the live mutations use.
    """

    def __init__(self, journal_path: str | Path | None = None):
        self._lock = threading.Lock()
        self._annotations: dict[str, Annotation] = {}
        self._counter = 0
        self.version = 0
        self._journal_path = Path(journal_path) if journal_path is not None else None
        if self._journal_path is not None and self._journal_path.exists():
            with open(self._journal_path) as f:
                for line in f:
                    if line.strip():
                        self._fold(json.loads(line))

    # -- reads ---------------------------------------------------------------

    def get(self, annotation_id: str) -> Annotation:
        try:
            return self._annotations[annotation_id]
        except KeyError:
            raise KeyError(f"unknown annotation {annotation_id!r}") from None

    def annotations(self, frame_index: int | None = None, review: ReviewState | None = None) -> list[Annotation]:
        out = sorted(self._annotations.values(), key=lambda a: a.id)
        if frame_index is not None:
            out = [a for a in out if a.frame_index == frame_index]
        if review is not None:
            out = [a for a in out if a.review == review]
        return out

    def __len__(self) -> int:
        return len(self._annotations)

    # -- mutations -----------------------------------------------------------

    def create(
        self,
        frame_index: int,
        box: BoundingBox,
        stage: StageClass,
        annotator: str,
        track_id: str | None = None,
    ) -> Annotation:
        with self._lock:
            record = {
                "ts": _now(),
                "actor": annotator,
                "annotation_id": f"a{self._counter:05d}",
                "action": "create",
                "payload": {
                    "frame": frame_index,
                    "box": list(box.as_tuple()),
                    "stage": stage.wire_name,
                    "track_id": track_id,
                },
            }
            ann = self._fold(record)
            self._append(record)
            return ann

    def update(self, annotation_id: str, actor: str, box: BoundingBox | None = None, stage: StageClass | None = None) -> Annotation:
        """Edit geometry or stage; only legal while the annotation is a Draft."""
        with self._lock:
            ann = self.get(annotation_id)
            if ann.review != ReviewState.DRAFT:
                raise IllegalTransition(f"cannot edit annotation in state {ann.review.value}")
            payload = {}
            if box is not None:
                payload["box"] = list(box.as_tuple())
            if stage is not None:
                payload["stage"] = stage.wire_name
            record = {
                "ts": _now(),
                "actor": actor,
                "annotation_id": annotation_id,
                "action": "update",
                "payload": payload,
            }
            ann = self._fold(record)
            self._append(record)
            return ann

    def transition_review(self, annotation_id: str, action: str, actor: str, note: str = "") -> Annotation:
        with self._lock:
            ann = self.get(annotation_id)
            # dry-run the pure transition first so illegal requests journal nothing
            apply_review_action(ann, action, actor, note)
            record = {
                "ts": _now(),
                "actor": actor,
                "annotation_id": annotation_id,
                "action": action,
                "payload": {"note": note} if note else {},
            }
            ann = self._fold(record)
            self._append(record)
            return ann

    # -- journal fold ----------------------------------------------------------

    def _fold(self, record: dict) -> Annotation:
        aid = record["annotation_id"]
        action = record["action"]
        payload = record.get("payload", {})
        if action == "create":
            ann = Annotation(
                id=aid,
                frame_index=int(payload["frame"]),
                box=BoundingBox(*payload["box"]),
                stage=StageClass.from_wire(payload["stage"]),
                annotator=record["actor"],
                track_id=payload.get("track_id"),
                history=(AnnotationEvent(record["ts"], record["actor"], "create", payload),),
            )
            self._counter = max(self._counter, int(aid.lstrip("a")) + 1)
        elif action == "update":
            ann = self._annotations[aid]
            if "box" in payload:
                ann = replace(ann, box=BoundingBox(*payload["box"]))
            if "stage" in payload:
                ann = replace(ann, stage=StageClass.from_wire(payload["stage"]))
            ann = replace(
                ann,
                history=ann.history + (AnnotationEvent(record["ts"], record["actor"], "update", payload),),
            )
        else:
            ann = apply_review_action(
                self._annotations[aid], action, record["actor"], payload.get("note", ""), ts=record["ts"]
            )
        self._annotations[aid] = ann
        self.version += 1
        return ann

    def _append(self, record: dict) -> None:
        if self._journal_path is None:
            return
        self._journal_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self._journal_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# -- suggested boxes ----------------------------------------------------------

SUGGEST_HALF_EXTENT_DEG = 15.0


def suggest_box(center: CycloneCenter, grid: GeoGrid, half_extent_deg: float = SUGGEST_HALF_EXTENT_DEG) -> BoundingBox:
    """Axis-aligned seed box around a detected center, clamped to the image.

    The box spans +/- half_extent_deg in both latitude and longitude,
    converted to normalized image coordinates. It clamps at the image seam
    rather than wrapping.
    """
    span_lon = grid.n_lon * abs(grid.d_lon)
    span_lat = (grid.n_lat - 1) * abs(grid.d_lat)
    cx = ((center.position.lon - grid.lon0) % 360.0) / span_lon
    cy = (grid.lat0 - center.position.lat) / span_lat
    ex = half_extent_deg / span_lon
    ey = half_extent_deg / span_lat
    return BoundingBox(
        xmin=max(0.0, cx - ex),
        ymin=max(0.0, cy - ey),
        xmax=min(1.0, cx + ex),
        ymax=min(1.0, cy + ey),
    )


# -- dataset manifest and export ------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    frame: int
    boxes: tuple[tuple[BoundingBox, StageClass], ...]
    split: str  # "train" | "test"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        frames = [e.frame for e in self.entries]
        if len(frames) != len(set(frames)):
            raise ValueError("a frame may appear in exactly one manifest entry")

    def frames(self, split: str | None = None) -> list[ManifestEntry]:
        if split is None:
            return list(self.entries)
        return [e for e in self.entries if e.split == split]


def split_train_test(
    frame_boxes: Mapping[int, Iterable[tuple[BoundingBox, StageClass]]],
    ratio: float = 0.2,
    seed: int = 0,
) -> DatasetManifest:
    """Deterministically assign whole frames to train/test splits.

    |Test| = round(ratio * number of frames), rounding half up. All boxes on a
    frame share its split.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    frames = sorted(frame_boxes)
    if not frames:
        raise ValueError("cannot split an empty dataset")
    n_test = int(len(frames) * ratio + 0.5)
    order = np.random.default_rng(seed).permutation(len(frames))
    test_frames = {frames[i] for i in order[:n_test]}
    entries = [
        ManifestEntry(f, tuple(frame_boxes[f]), "test" if f in test_frames else "train")
        for f in frames
    ]
    return DatasetManifest(tuple(entries), seed=seed)


def manifest_from_annotations(
    annotations: Iterable[Annotation], ratio: float = 0.2, seed: int = 0
) -> DatasetManifest:
    """Group Consensus annotations by frame and split; others are skipped with a warning."""
    by_frame: dict[int, list[tuple[BoundingBox, StageClass]]] = {}
    for ann in annotations:
        if ann.review != ReviewState.CONSENSUS:
            warnings.warn(f"skipping {ann.id}: review state {ann.review.value} is not consensus")
            continue
        by_frame.setdefault(ann.frame_index, []).append((ann.box, ann.stage))
    return split_train_test(by_frame, ratio=ratio, seed=seed)


def export_dataset(manifest: DatasetManifest, images: Mapping[int, np.ndarray], out_dir: str | Path) -> Path:
    """Write frames/<index>.png plus annotations.jsonl; returns the annotation file path."""
    out = Path(out_dir)
    missing = [e.frame for e in manifest.entries if e.frame not in images]
    if missing:
        raise KeyError(f"manifest references frames with no image: {missing}")
    (out / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for entry in sorted(manifest.entries, key=lambda e: e.frame):
        image_rel = f"frames/{entry.frame}.png"
        (out / image_rel).write_bytes(encode_png(np.asarray(images[entry.frame], dtype=np.uint8)))
        lines.append(
            json.dumps(
                {
                    "frame": entry.frame,
                    "image": image_rel,
                    "boxes": [
                        {
                            "xmin": b.xmin,
                            "ymin": b.ymin,
                            "xmax": b.xmax,
                            "ymax": b.ymax,
                            "stage": s.wire_name,
                        }
                        for b, s in entry.boxes
                    ],
                    "split": entry.split,
                },
                sort_keys=True,
            )
        )
    path = out / "annotations.jsonl"
    path.write_text("".join(line + "\n" for line in lines))
    return path


def import_dataset(in_dir: str | Path, seed: int = 0) -> DatasetManifest:
    """Inverse of export_dataset on the manifest."""
    path = Path(in_dir) / "annotations.jsonl"
    entries = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            boxes = tuple(
                (BoundingBox(b["xmin"], b["ymin"], b["xmax"], b["ymax"]), StageClass.from_wire(b["stage"]))
                for b in rec["boxes"]
            )
            entries.append(ManifestEntry(rec["frame"], boxes, rec["split"]))
    return DatasetManifest(tuple(entries), seed=seed)


def category_counts(manifest: DatasetManifest) -> dict[tuple[StageClass, str], int]:
    """Number of boxes per (stage, split)."""
    counts = {(stage, split): 0 for stage in StageClass for split in ("train", "test")}
    for entry in manifest.entries:
        for _, stage in entry.boxes:
            counts[(stage, entry.split)] += 1
    return counts
