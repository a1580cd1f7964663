"""Global lat-lon scalar fields, the ETCG file format, rendering, and great-circle geometry.

Grids are stored north row first (row 0 is lat0, normally +90) so rendered
images come out with north at the top. Longitude is periodic; latitude runs
pole to pole.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from PIL import Image

EARTH_RADIUS_KM = 6371.0
STEP_SECONDS = 21600  # 6-hour frame cadence

_MAGIC = b"ETCG"
_VERSION = 1
_HEADER = struct.Struct("<4sHBIIddddq")


class FieldKind(IntEnum):
    TTR = 0
    MSLP = 1
    VORTICITY = 2


class GridFileError(ValueError):
    """Raised for malformed ETCG files; `field` names the offending part."""

    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name


@dataclass(frozen=True)
class LatLon:
    """A point on the sphere; lon is normalized to [0, 360)."""

    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"lat {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", self.lon % 360.0)


@dataclass(frozen=True, eq=False)
class GeoGrid:
    """One scalar field on a regular lat-lon grid at one timestamp."""

    n_lon: int
    n_lat: int
    lat0: float
    d_lat: float
    lon0: float
    d_lon: float
    timestamp: int
    kind: FieldKind
    values: np.ndarray  # shape (n_lat, n_lon), row 0 = lat0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size != self.n_lon * self.n_lat:
            raise ValueError(
                f"values: payload has {v.size} values, expected n_lon*n_lat = {self.n_lon * self.n_lat}"
            )
        v = v.reshape(self.n_lat, self.n_lon)
        if not np.all(np.isfinite(v)):
            raise ValueError("values: field contains non-finite values")
        if not math.isclose(self.n_lon * abs(self.d_lon), 360.0, rel_tol=1e-12):
            raise ValueError(f"d_lon: n_lon*|d_lon| = {self.n_lon * abs(self.d_lon)} != 360")
        if not math.isclose(self.lat0 + (self.n_lat - 1) * self.d_lat, -self.lat0, rel_tol=1e-12, abs_tol=1e-9):
            raise ValueError("d_lat: grid is not pole-to-pole (lat0 + (n_lat-1)*d_lat != -lat0)")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", FieldKind(self.kind))

    def cell_latlon(self, i_lat: int, i_lon: int) -> LatLon:
        """Lat-lon of a cell; the longitude index wraps modulo n_lon."""
        return LatLon(self.lat0 + i_lat * self.d_lat, self.lon0 + (i_lon % self.n_lon) * self.d_lon)

    def value_at(self, i_lat: int, i_lon: int) -> float:
        return float(self.values[i_lat, i_lon % self.n_lon])

    def same_geometry(self, other: "GeoGrid") -> bool:
        return (
            self.n_lon == other.n_lon
            and self.n_lat == other.n_lat
            and self.lat0 == other.lat0
            and self.d_lat == other.d_lat
            and self.lon0 == other.lon0
            and self.d_lon == other.d_lon
        )


@dataclass(frozen=True)
class FrameSeries:
    """Consecutive frames of one field, 6 hours apart, on one grid geometry."""

    frames: tuple[GeoGrid, ...]
    step_seconds: int = STEP_SECONDS

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        for a, b in zip(self.frames, self.frames[1:]):
            if b.timestamp - a.timestamp != self.step_seconds:
                raise ValueError(
                    f"timestamps must increase by exactly {self.step_seconds}s, got {b.timestamp - a.timestamp}"
                )
            if not a.same_geometry(b) or a.kind != b.kind:
                raise ValueError("all frames must share grid geometry and kind")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> GeoGrid:
        return self.frames[i]


def save_grid(grid: GeoGrid, path) -> None:
    """Write the ETCG binary format (f32 payload, little-endian, north row first)."""
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        int(grid.kind),
        grid.n_lon,
        grid.n_lat,
        grid.lat0,
        grid.d_lat,
        grid.lon0,
        grid.d_lon,
        grid.timestamp,
    )
    payload = grid.values.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_grid(path, expected_kind: FieldKind | None = None) -> GeoGrid:
    """Read an ETCG file, checking the magic, version, kind, and payload length."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size or raw[:4] != _MAGIC:
        raise GridFileError("magic", f"{path}: not an ETCG file (bad magic)")
    magic, version, kind_byte, n_lon, n_lat, lat0, d_lat, lon0, d_lon, ts = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise GridFileError("version", f"{path}: unsupported ETCG version {version}")
    try:
        kind = FieldKind(kind_byte)
    except ValueError:
        raise GridFileError("kind", f"{path}: unknown field kind byte {kind_byte}") from None
    if expected_kind is not None and kind != expected_kind:
        raise GridFileError("kind", f"{path}: kind {kind.name} != expected {FieldKind(expected_kind).name}")
    expected = n_lon * n_lat
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if values.size < expected:
        raise GridFileError("values", f"{path}: payload shorter than n_lon*n_lat ({values.size} < {expected})")
    if values.size > expected:
        raise GridFileError("values", f"{path}: payload longer than n_lon*n_lat ({values.size} > {expected})")
    if not np.all(np.isfinite(values)):
        raise GridFileError("values", f"{path}: payload contains non-finite values")
    try:
        return GeoGrid(n_lon, n_lat, lat0, d_lat, lon0, d_lon, ts, kind, values.astype(np.float64))
    except ValueError as e:
        raise GridFileError(str(e).split(":", 1)[0], f"{path}: {e}") from None


def render_image(grid: GeoGrid) -> np.ndarray:
    """Min-max normalize the field to a uint8 image of shape (n_lat, n_lon).

    A constant field renders as all zeros.
    """
    v = grid.values
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_png(image: np.ndarray) -> bytes:
    """Encode a uint8 grayscale array as PNG bytes (deterministic for equal input)."""
    if image.dtype != np.uint8:
        raise ValueError("encode_png expects a uint8 array")
    buf = io.BytesIO()
    Image.fromarray(image, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("L")
    return np.asarray(img, dtype=np.uint8)


def haversine_km(a: LatLon, b: LatLon) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def angular_separation_deg(a: LatLon, b: LatLon) -> float:
    """Great-circle central angle in degrees, in [0, 180]."""
    return haversine_km(a, b) * 180.0 / (math.pi * EARTH_RADIUS_KM)
