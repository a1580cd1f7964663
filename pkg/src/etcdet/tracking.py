"""Cyclone-center detection on MSLP grids and linking into validated tracks.

A center is a strict 8-neighbor local minimum of mean sea level pressure
(longitude wraps, pole rows excluded). Centers too close together are
clustered and only the deepest survives. Tracks are disjoint chains of
centers across consecutive frames whose per-step displacement stays within
budget and that persist long enough.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import FieldKind, GeoGrid, LatLon, angular_separation_deg, haversine_km

HOURS_PER_STEP = 6
TROPICAL_LAT_DEG = 25.0  # centers south of this are flagged for the annotator


@dataclass(frozen=True)
class CycloneCenter:
    frame_index: int
    cell: tuple[int, int]  # (i_lat, i_lon)
    position: LatLon
    mslp: float

    @property
    def possibly_tropical(self) -> bool:
        return self.position.lat < TROPICAL_LAT_DEG


@dataclass(frozen=True)
class Track:
    centers: tuple[CycloneCenter, ...]
    id: str

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(self.centers))
        if not self.centers:
            raise ValueError("a track needs at least one center")
        for a, b in zip(self.centers, self.centers[1:]):
            if b.frame_index != a.frame_index + 1:
                raise ValueError("track frames must be strictly consecutive")

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def duration_hours(self) -> int:
        return (len(self.centers) - 1) * HOURS_PER_STEP

    @property
    def frame_indices(self) -> list[int]:
        return [c.frame_index for c in self.centers]


@dataclass(frozen=True)
class TrackerConfig:
    max_step_km: float = 333.36
    min_frames: int = 4
    neighbor_min_deg: float = 10.0
    hemisphere: str = "north"

    def __post_init__(self):
        if self.max_step_km <= 0 or self.min_frames <= 0 or self.neighbor_min_deg <= 0:
            raise ValueError("tracker thresholds must be strictly positive")
        if self.hemisphere != "north":
            raise ValueError("only northern-hemisphere tracking is supported")


def validate_track(track: Track, cfg: TrackerConfig) -> None:
    """Raise if the track violates any invariant under this configuration."""
    if len(track) < cfg.min_frames:
        raise ValueError(f"track {track.id}: length {len(track)} < min_frames {cfg.min_frames}")
    for c in track.centers:
        if not c.position.lat > 0:
            raise ValueError(f"track {track.id}: center at lat {c.position.lat} not in northern hemisphere")
    for a, b in zip(track.centers, track.centers[1:]):
        d = haversine_km(a.position, b.position)
        if d > cfg.max_step_km:
            raise ValueError(f"track {track.id}: step of {d:.2f} km exceeds {cfg.max_step_km} km")


def find_local_minima(mslp: GeoGrid, cfg: TrackerConfig = TrackerConfig()) -> list[CycloneCenter]:
    """Strict 8-neighbor MSLP minima in the configured hemisphere, cluster-thinned.

    Pole rows are excluded (their 8-neighborhood is degenerate) and plateau
    minima are discarded because the comparison is strict. Candidates within
    neighbor_min_deg of each other are grouped transitively and only the
    lowest-pressure member of each group is kept.
    """
    if mslp.kind != FieldKind.MSLP:
        raise ValueError(f"find_local_minima needs an MSLP grid, got {mslp.kind.name}")
    v = mslp.values
    below = np.ones_like(v, dtype=bool)
    for di in (-1, 0, 1):
        shifted = np.roll(v, 0, axis=0) if di == 0 else _shift_lat(v, di)
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            below &= v < np.roll(shifted, dj, axis=1)
    below[0, :] = False
    below[-1, :] = False

    lats = mslp.lat0 + np.arange(mslp.n_lat) * mslp.d_lat
    below[lats <= 0.0, :] = False

    candidates = [
        CycloneCenter(-1, (int(i), int(j)), mslp.cell_latlon(int(i), int(j)), float(v[i, j]))
        for i, j in np.argwhere(below)
    ]
    return _cluster_deepest(candidates, cfg.neighbor_min_deg)


def _shift_lat(v: np.ndarray, di: int) -> np.ndarray:
    # Shift rows without wrapping; vacated rows never matter because the
    # pole rows are masked out afterwards.
    out = np.empty_like(v)
    if di == 1:
        out[:-1] = v[1:]
        out[-1] = v[-1]
    else:
        out[1:] = v[:-1]
        out[0] = v[0]
    return out


def _cluster_deepest(centers: list[CycloneCenter], min_deg: float) -> list[CycloneCenter]:
    """Keep the deepest center of every transitive near-neighbor group."""
    n = len(centers)
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            if angular_separation_deg(centers[i].position, centers[j].position) < min_deg:
                parent[find(i)] = find(j)

    best: dict[int, CycloneCenter] = {}
    for i, c in enumerate(centers):
        root = find(i)
        cur = best.get(root)
        if cur is None or (c.mslp, c.cell) < (cur.mslp, cur.cell):
            best[root] = c
    return sorted(best.values(), key=lambda c: c.cell)


def detect_centers(series_frames: list[GeoGrid], cfg: TrackerConfig = TrackerConfig()) -> list[list[CycloneCenter]]:
    """Per-frame minima with frame_index filled in."""
    out = []
    for idx, frame in enumerate(series_frames):
        centers = [
            CycloneCenter(idx, c.cell, c.position, c.mslp) for c in find_local_minima(frame, cfg)
        ]
        out.append(centers)
    return out


def link_tracks(per_frame_centers: list[list[CycloneCenter]], cfg: TrackerConfig = TrackerConfig()) -> list[Track]:
    """Chain centers of adjacent frames into disjoint tracks.

    Depth-first from the earliest unclaimed center: at every step the nearest
    admissible successor wins (ties by lower MSLP, then lower longitude
    index), and a claimed center is unavailable to any other chain. Chains
    shorter than min_frames are dropped after extraction, so the claim order
    does not depend on min_frames.
    """
    claimed: set[tuple[int, tuple[int, int]]] = set()
    tracks: list[Track] = []
    n_frames = len(per_frame_centers)
    counter = 0
    for f in range(n_frames):
        for start in sorted(per_frame_centers[f], key=lambda c: c.cell):
            key = (start.frame_index, start.cell)
            if key in claimed:
                continue
            chain = [start]
            claimed.add(key)
            cur = start
            nxt = cur.frame_index + 1
            while nxt < n_frames:
                options = [
                    (haversine_km(cur.position, c.position), c.mslp, c.cell[1], c)
                    for c in per_frame_centers[nxt]
                    if (c.frame_index, c.cell) not in claimed
                    and haversine_km(cur.position, c.position) <= cfg.max_step_km
                ]
                if not options:
                    break
                cur = min(options, key=lambda o: o[:3])[3]
                chain.append(cur)
                claimed.add((cur.frame_index, cur.cell))
                nxt += 1
            if len(chain) >= cfg.min_frames:
                tracks.append(Track(tuple(chain), id=f"t{counter:04d}"))
                counter += 1
    return tracks


@dataclass(frozen=True)
class TrackStats:
    count: int
    min_duration_hours: int
    max_duration_hours: int
    mean_duration_hours: float
    spans: tuple[tuple[str, int, int, int], ...] = field(default_factory=tuple)
    # spans: (track id, first frame, last frame, duration hours)


def track_report(tracks: list[Track]) -> TrackStats:
    """Aggregate duration statistics; a length-k track spans (k-1)*6 hours."""
    if not tracks:
        return TrackStats(0, 0, 0, 0.0)
    durations = [t.duration_hours for t in tracks]
    spans = tuple(
        (t.id, t.centers[0].frame_index, t.centers[-1].frame_index, t.duration_hours) for t in tracks
    )
    return TrackStats(
        count=len(tracks),
        min_duration_hours=min(durations),
        max_duration_hours=max(durations),
        mean_duration_hours=sum(durations) / len(durations),
        spans=spans,
    )


def track_to_record(track: Track) -> dict:
    return {
        "id": track.id,
        "frames": track.frame_indices,
        "centers": [
            {"frame": c.frame_index, "lat": c.position.lat, "lon": c.position.lon, "mslp": c.mslp}
            for c in track.centers
        ],
        "duration_hours": track.duration_hours,
    }


def tracks_to_jsonl(tracks: list[Track]) -> str:
    """One track per line: id, frame indices, per-center lat/lon/MSLP, duration."""
    return "".join(json.dumps(track_to_record(t), sort_keys=True) + "\n" for t in tracks)
