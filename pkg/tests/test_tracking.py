import numpy as np
import pytest

from etcdet import synth
from etcdet.grid import FieldKind, LatLon, angular_separation_deg, haversine_km
from etcdet.tracking import (
    CycloneCenter,
    Track,
    TrackerConfig,
    TrackStats,
    detect_centers,
    find_local_minima,
    link_tracks,
    track_report,
    tracks_to_jsonl,
    validate_track,
)
from test_grid import toy_grid


def oracle_minima(grid, cfg):
    """Brute-force scan: strict 8-neighbor minima, then transitive clustering."""
    v = grid.values
    n_lat, n_lon = v.shape
    cands = []
    for i in range(1, n_lat - 1):
        lat = grid.lat0 + i * grid.d_lat
        if lat <= 0:
            continue
        for j in range(n_lon):
            center = v[i, j]
            neigh = [
                v[i + di, (j + dj) % n_lon]
                for di in (-1, 0, 1)
                for dj in (-1, 0, 1)
                if (di, dj) != (0, 0)
            ]
            if all(center < nv for nv in neigh):
                cands.append((i, j, float(center)))
    # transitive closure clustering, keep deepest
    groups = []
    for c in cands:
        merged = [c]
        rest = []
        for g in groups:
            if any(
                angular_separation_deg(grid.cell_latlon(a[0], a[1]), grid.cell_latlon(b[0], b[1]))
                < cfg.neighbor_min_deg
                for a in g
                for b in merged
            ):
                merged.extend(g)
            else:
                rest.append(g)
        groups = rest + [merged]
    out = []
    for g in groups:
        best = min(g, key=lambda c: (c[2], c[0], c[1]))
        out.append((best[0], best[1]))
    return sorted(out)


class TestFindLocalMinima:
    def test_uniform_field_has_no_minima(self):
        series = synth.gen_mslp_series([], n_frames=1)
        assert find_local_minima(series[0]) == []

    def test_wrong_kind_rejected(self):
        g = toy_grid(kind=FieldKind.TTR)
        with pytest.raises(ValueError, match="MSLP"):
            find_local_minima(g)

    def test_single_planted_low_matches_oracle(self):
        low = synth.PlantedLow(synth.path_on_cells([(18, 72)]))  # 45N 180E
        series = synth.gen_mslp_series([low], n_frames=1)
        cfg = TrackerConfig()
        got = find_local_minima(series[0], cfg)
        assert [c.cell for c in got] == [(18, 72)]
        assert got[0].position == LatLon(45.0, 180.0)
        assert [c.cell for c in got] == oracle_minima(series[0], cfg)

    def test_close_pair_clustered_to_deepest(self):
        # two sharp depressions 5 degrees apart; only the deeper survives
        deep = synth.PlantedLow(synth.path_on_cells([(18, 40)]), depth=5325.0, radius_deg=1.5)
        shallow = synth.PlantedLow(synth.path_on_cells([(20, 40)]), depth=3300.0, radius_deg=1.5)
        series = synth.gen_mslp_series([deep, shallow], n_frames=1)
        cfg = TrackerConfig()
        got = find_local_minima(series[0], cfg)
        assert [c.cell for c in got] == [(18, 40)]
        assert got[0].mslp == pytest.approx(101325.0 - 5325.0, abs=30.0)
        assert [c.cell for c in got] == oracle_minima(series[0], cfg)

    def test_two_separated_lows_both_found(self):
        a = synth.PlantedLow(synth.path_on_cells([(18, 40)]))
        b = synth.PlantedLow(synth.path_on_cells([(18, 48)]))  # 20 degrees east
        series = synth.gen_mslp_series([a, b], n_frames=1)
        got = find_local_minima(series[0])
        assert [c.cell for c in got] == [(18, 40), (18, 48)]

    def test_southern_hemisphere_excluded(self):
        low = synth.PlantedLow(synth.path_on_cells([(54, 40)]))  # 45S
        series = synth.gen_mslp_series([low], n_frames=1)
        assert find_local_minima(series[0]) == []

    def test_tropical_flag(self):
        c = CycloneCenter(0, (30, 0), LatLon(15.0, 0.0), 100000.0)
        assert c.possibly_tropical
        assert not CycloneCenter(0, (18, 0), LatLon(45.0, 0.0), 100000.0).possibly_tropical


class TestLinkTracks:
    def test_moving_low_recovered(self):
        cells = [(18, 40 + k) for k in range(6)]
        low = synth.PlantedLow(synth.path_on_cells(cells))
        series = synth.gen_mslp_series([low], n_frames=6)
        tracks = link_tracks(detect_centers(list(series.frames)))
        assert len(tracks) == 1
        assert [c.cell for c in tracks[0].centers] == cells
        assert tracks[0].duration_hours == 30

    def test_fast_low_yields_no_track(self):
        # 5 degrees of latitude per frame is ~556 km, over the 333.36 budget
        cells = [(10 + 2 * k, 60) for k in range(4)]
        a = synth.cell_position(*cells[0])
        b = synth.cell_position(*cells[1])
        assert haversine_km(a, b) > 333.36
        low = synth.PlantedLow(synth.path_on_cells(cells))
        series = synth.gen_mslp_series([low], n_frames=4)
        assert link_tracks(detect_centers(list(series.frames))) == []

    def test_short_lived_low_yields_no_track(self):
        low = synth.PlantedLow(synth.path_on_cells([(14, 100)] * 3))
        series = synth.gen_mslp_series([low], n_frames=3)
        assert link_tracks(detect_centers(list(series.frames))) == []

    def test_tracks_are_disjoint_and_valid(self):
        rng = np.random.default_rng(5)
        lows = []
        for idx in range(3):
            i = 10 + 4 * idx
            j = 30 * idx
            cells = [(i, j + k) for k in range(5)]
            lows.append(synth.PlantedLow(synth.path_on_cells(cells)))
        series = synth.gen_mslp_series(lows, n_frames=5)
        cfg = TrackerConfig()
        tracks = link_tracks(detect_centers(list(series.frames), cfg), cfg)
        assert len(tracks) == 3
        seen = set()
        for t in tracks:
            validate_track(t, cfg)
            for c in t.centers:
                key = (c.frame_index, c.cell)
                assert key not in seen
                seen.add(key)

    def test_determinism(self):
        cells = [(18, 40 + k) for k in range(6)]
        low = synth.PlantedLow(synth.path_on_cells(cells))
        series = synth.gen_mslp_series([low], n_frames=6)
        per_frame = detect_centers(list(series.frames))
        t1 = link_tracks(per_frame)
        t2 = link_tracks(per_frame)
        assert [(t.id, t.frame_indices, [c.cell for c in t.centers]) for t in t1] == [
            (t.id, t.frame_indices, [c.cell for c in t.centers]) for t in t2
        ]

    def test_min_frames_monotone(self):
        cells = [(18, 40 + k) for k in range(6)]
        low = synth.PlantedLow(synth.path_on_cells(cells))
        series = synth.gen_mslp_series([low], n_frames=6)
        per_frame = detect_centers(list(series.frames))
        counts = [
            len(link_tracks(per_frame, TrackerConfig(min_frames=m))) for m in (3, 4, 5, 6, 7)
        ]
        assert counts == sorted(counts, reverse=True)

    def test_max_step_monotone_on_constant_speed_lows(self):
        # each low moves at a constant per-step distance; raising the budget
        # can only switch whole chains from unlinked to linked
        rng = np.random.default_rng(11)
        lows = []
        for idx in range(4):
            i0 = 8 + 5 * idx
            step = int(rng.integers(0, 3))  # 0, 2.5 or 5 degrees of longitude per frame
            cells = [(i0, (20 * idx + step * k) % 144) for k in range(5)]
            lows.append(synth.PlantedLow(synth.path_on_cells(cells)))
        series = synth.gen_mslp_series(lows, n_frames=5)
        per_frame = detect_centers(list(series.frames))
        budgets = [100.0, 250.0, 333.36, 450.0, 600.0]
        counts = [len(link_tracks(per_frame, TrackerConfig(max_step_km=b))) for b in budgets]
        assert counts == sorted(counts)


class TestTrackReport:
    def _track(self, n, start=0):
        centers = tuple(
            CycloneCenter(start + k, (18, 40 + k), synth.cell_position(18, 40 + k), 100000.0)
            for k in range(n)
        )
        return Track(centers, id=f"t{n:04d}")

    def test_four_frame_track_spans_18_hours(self):
        stats = track_report([self._track(4)])
        assert stats.count == 1
        assert stats.min_duration_hours == stats.max_duration_hours == 18
        assert stats.spans[0][1:] == (0, 3, 18)

    def test_empty(self):
        assert track_report([]) == TrackStats(0, 0, 0, 0.0)

    def test_37_frames_is_216_hours(self):
        stats = track_report([self._track(37)])
        assert stats.max_duration_hours == 216

    def test_jsonl_export_shape(self):
        text = tracks_to_jsonl([self._track(4)])
        import json

        rec = json.loads(text.splitlines()[0])
        assert rec["frames"] == [0, 1, 2, 3]
        assert rec["duration_hours"] == 18
        assert {"frame", "lat", "lon", "mslp"} <= set(rec["centers"][0])
