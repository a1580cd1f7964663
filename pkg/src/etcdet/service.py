"""HTTP API for the annotation UI: frames, algorithmic suggestions, and the
review workflow, all backed by one LabelStore writer.

Actor identity arrives in the X-Actor header (X-Role: annotator|reviewer is
informational). Every response carries the store version so the client can
refresh optimistically. Error mapping: 400 malformed, 404 unknown id,
409 illegal transition or self-review, 422 invalid box geometry.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Query, Response
from pydantic import BaseModel, Field

from .grid import FrameSeries, GeoGrid, encode_png, render_image
from .labels import (
    Annotation,
    BoundingBox,
    IllegalTransition,
    LabelStore,
    MissingNote,
    ReviewState,
    SelfReview,
    StageClass,
    category_counts,
    export_dataset,
    manifest_from_annotations,
    suggest_box,
)
from .tracking import TrackerConfig, detect_centers
from .metrics import iou  # noqa: F401  (re-exported for clients of the module)


@dataclass
class AnnotationProject:
    """Everything one annotation session serves: frames, store, tracker config."""

    frames: list[GeoGrid]
    store: LabelStore
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    cache_dir: Path | None = None
    mslp_frames: list[GeoGrid] | None = None  # optional twin series for detection

    def detection_frames(self) -> list[GeoGrid]:
        return self.mslp_frames if self.mslp_frames is not None else self.frames


class BoxPayload(BaseModel):
    xmin: float
    ymin: float
    xmax: float
    ymax: float


class AnnotationPayload(BaseModel):
    frame: int
    box: BoxPayload
    stage: str
    track_id: str | None = None


class AnnotationUpdate(BaseModel):
    box: BoxPayload | None = None
    stage: str | None = None


class ReviewPayload(BaseModel):
    action: str
    note: str = ""


def _box_from(payload: BoxPayload) -> BoundingBox:
    try:
        return BoundingBox(payload.xmin, payload.ymin, payload.xmax, payload.ymax)
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e)) from None


def _stage_from(name: str) -> StageClass:
    try:
        return StageClass.from_wire(name)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e)) from None


def _annotation_json(ann: Annotation) -> dict:
    return {
        "id": ann.id,
        "frame": ann.frame_index,
        "box": {
            "xmin": ann.box.xmin,
            "ymin": ann.box.ymin,
            "xmax": ann.box.xmax,
            "ymax": ann.box.ymax,
        },
        "stage": ann.stage.wire_name,
        "annotator": ann.annotator,
        "review": ann.review.value,
        "track_id": ann.track_id,
        "history": [
            {"ts": e.ts, "actor": e.actor, "action": e.action, "payload": dict(e.payload)}
            for e in ann.history
        ],
    }


def create_app(project: AnnotationProject) -> FastAPI:
    app = FastAPI(title="etcdet annotation service")
    png_cache: dict[str, bytes] = {}

    def versioned(payload: dict) -> dict:
        payload["version"] = project.store.version
        return payload

    def actor_or_400(x_actor: str | None) -> str:
        if not x_actor:
            raise HTTPException(status_code=400, detail="X-Actor header required")
        return x_actor

    @app.get("/api/frames")
    def frames(page: int = Query(0, ge=0), page_size: int = Query(50, ge=1, le=500)):
        lo = page * page_size
        items = [
            {
                "index": i,
                "timestamp": g.timestamp,
                "kind": g.kind.name,
                "annotations": len(project.store.annotations(frame_index=i)),
            }
            for i, g in enumerate(project.frames[lo : lo + page_size], start=lo)
        ]
        return versioned({"frames": items, "total": len(project.frames), "page": page})

    @app.get("/api/frames/{index}/image.png")
    def frame_image(index: int):
        if not 0 <= index < len(project.frames):
            raise HTTPException(status_code=404, detail=f"no frame {index}")
        grid = project.frames[index]
        key = f"{index}-{hashlib.sha256(grid.values.tobytes()).hexdigest()[:16]}"
        if key not in png_cache:
            if project.cache_dir is not None:
                path = project.cache_dir / f"{key}.png"
                if not path.exists():
                    project.cache_dir.mkdir(parents=True, exist_ok=True)
                    path.write_bytes(encode_png(render_image(grid)))
                png_cache[key] = path.read_bytes()
            else:
                png_cache[key] = encode_png(render_image(grid))
        return Response(content=png_cache[key], media_type="image/png")

    @app.get("/api/frames/{index}/suggestions")
    def suggestions(index: int):
        det_frames = project.detection_frames()
        if not 0 <= index < len(det_frames):
            raise HTTPException(status_code=404, detail=f"no frame {index}")
        centers = detect_centers([det_frames[index]], project.tracker)[0]
        out = []
        for c in centers:
            b = suggest_box(c, det_frames[index])
            out.append(
                {
                    "lat": c.position.lat,
                    "lon": c.position.lon,
                    "mslp": c.mslp,
                    "possibly_tropical": c.possibly_tropical,
                    "box": {"xmin": b.xmin, "ymin": b.ymin, "xmax": b.xmax, "ymax": b.ymax},
                }
            )
        return versioned({"frame": index, "suggestions": out})

    @app.get("/api/annotations")
    def list_annotations(frame: int | None = None, review: str | None = None):
        state = ReviewState(review) if review else None
        anns = project.store.annotations(frame_index=frame, review=state)
        return versioned({"annotations": [_annotation_json(a) for a in anns]})

    @app.get("/api/annotations/{annotation_id}")
    def get_annotation(annotation_id: str):
        try:
            ann = project.store.get(annotation_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown annotation {annotation_id}") from None
        return versioned({"annotation": _annotation_json(ann)})

    @app.post("/api/annotations", status_code=201)
    def create_annotation(payload: AnnotationPayload, x_actor: str | None = Header(None)):
        actor = actor_or_400(x_actor)
        if not 0 <= payload.frame < len(project.frames):
            raise HTTPException(status_code=404, detail=f"no frame {payload.frame}")
        ann = project.store.create(
            payload.frame,
            _box_from(payload.box),
            _stage_from(payload.stage),
            actor,
            track_id=payload.track_id,
        )
        return versioned({"annotation": _annotation_json(ann)})

    @app.put("/api/annotations/{annotation_id}")
    def update_annotation(annotation_id: str, payload: AnnotationUpdate, x_actor: str | None = Header(None)):
        actor = actor_or_400(x_actor)
        box = _box_from(payload.box) if payload.box is not None else None
        stage = _stage_from(payload.stage) if payload.stage is not None else None
        if box is None and stage is None:
            raise HTTPException(status_code=400, detail="nothing to update")
        try:
            ann = project.store.update(annotation_id, actor, box=box, stage=stage)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown annotation {annotation_id}") from None
        except IllegalTransition as e:
            raise HTTPException(status_code=409, detail=str(e)) from None
        return versioned({"annotation": _annotation_json(ann)})

    @app.put("/api/annotations/{annotation_id}/review")
    def review_annotation(annotation_id: str, payload: ReviewPayload, x_actor: str | None = Header(None)):
        actor = actor_or_400(x_actor)
        try:
            ann = project.store.transition_review(annotation_id, payload.action, actor, payload.note)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown annotation {annotation_id}") from None
        except (IllegalTransition, SelfReview) as e:
            raise HTTPException(status_code=409, detail=str(e)) from None
        except MissingNote as e:
            raise HTTPException(status_code=409, detail=str(e)) from None
        return versioned({"annotation": _annotation_json(ann)})

    @app.get("/api/export")
    def export(split: str | None = None, ratio: float = 0.2, seed: int = 0):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            manifest = manifest_from_annotations(project.store.annotations(), ratio=ratio, seed=seed)
        entries = manifest.frames(split) if split in ("train", "test") else list(manifest.entries)
        lines = []
        for entry in sorted(entries, key=lambda e: e.frame):
            lines.append(
                {
                    "frame": entry.frame,
                    "image": f"frames/{entry.frame}.png",
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
                }
            )
        import json

        body = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in lines)
        return Response(content=body, media_type="application/jsonl")

    @app.get("/api/stats")
    def stats():
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            manifest = manifest_from_annotations(project.store.annotations())
        counts = category_counts(manifest)
        payload = {
            stage.wire_name: {
                "train": counts[(stage, "train")],
                "test": counts[(stage, "test")],
            }
            for stage in StageClass
        }
        return versioned({"counts": payload, "annotations": len(project.store)})

    return app


def build_project_app(project_config) -> FastAPI:
    """Assemble an app from a ProjectConfig: frames from data_dir, journal beside them."""
    from .grid import FieldKind, load_grid

    data_dir = Path(project_config.data_dir)
    frame_files = sorted((data_dir / "frames").glob("*.etcg"))
    frames = [load_grid(p) for p in frame_files]
    ttr = [g for g in frames if g.kind == FieldKind.TTR]
    mslp = [g for g in frames if g.kind == FieldKind.MSLP]
    shown = ttr if ttr else mslp
    project = AnnotationProject(
        frames=shown,
        store=LabelStore(data_dir / "journal.jsonl"),
        tracker=project_config.tracker,
        cache_dir=data_dir / "cache",
        mslp_frames=mslp if mslp else None,
    )
    return create_app(project)
