"""Great-circle geometry and a uniform-grid index for radius / kNN queries.

Distances use the haversine formula on a sphere with the IUGG mean Earth
radius. The grid index buckets points into fixed-size lat/lon cells and
answers queries by scanning candidate cells, then filtering with exact
distances, so results are always identical to a brute-force scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ValidationError

EARTH_RADIUS_KM = 6371.0088  # IUGG mean radius
KM_PER_DEG_LAT = EARTH_RADIUS_KM * math.pi / 180.0


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValidationError(f"non-finite coordinates ({self.lat}, {self.lon})")
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude {self.lon} outside [-180, 180]")


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km between two points."""
    lat1, lon1 = math.radians(a.lat), math.radians(a.lon)
    lat2, lon2 = math.radians(b.lat), math.radians(b.lon)
    s = (
        math.sin((lat2 - lat1) / 2.0) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def _norm_lon(lon: float) -> float:
    # canonical range [-180, 180); 180 folds onto -180
    wrapped = math.fmod(lon + 180.0, 360.0)
    if wrapped < 0:
        wrapped += 360.0
    return wrapped - 180.0


@dataclass
class GridIndex:
    """Immutable-after-build uniform grid over (lat, lon) cells."""

    cell_size_deg: float
    cells: dict[tuple[int, int], list] = field(default_factory=dict)
    points: dict = field(default_factory=dict)

    def cell_of(self, p: GeoPoint) -> tuple[int, int]:
        return (
            math.floor(p.lat / self.cell_size_deg),
            math.floor(_norm_lon(p.lon) / self.cell_size_deg),
        )

    def __len__(self) -> int:
        return len(self.points)


def build_index(points, cell_size_deg: float = 0.5) -> GridIndex:
    """Index (id, GeoPoint) pairs. Duplicate ids are rejected."""
    if cell_size_deg <= 0:
        raise ValidationError(f"cell_size_deg must be > 0, got {cell_size_deg}")
    index = GridIndex(cell_size_deg=cell_size_deg)
    for pid, p in points:
        if pid in index.points:
            raise ValidationError(f"duplicate point id {pid!r}")
        index.points[pid] = p
        index.cells.setdefault(index.cell_of(p), []).append(pid)
    return index


def _candidate_ids(index: GridIndex, center: GeoPoint, r_km: float):
    """ids in every cell that could intersect the cap of radius r_km."""
    c = index.cell_size_deg
    dlat = r_km / KM_PER_DEG_LAT + 1e-12
    lat_lo = center.lat - dlat
    lat_hi = center.lat + dlat
    full_band = lat_lo <= -90.0 or lat_hi >= 90.0  # cap touches a pole
    lat_lo = max(lat_lo, -90.0)
    lat_hi = min(lat_hi, 90.0)

    if full_band:
        lon_intervals = [(-180.0, 180.0)]
    else:
        # worst-case km-per-degree of longitude over the latitude band
        min_cos = min(math.cos(math.radians(lat_lo)), math.cos(math.radians(lat_hi)))
        if min_cos <= 1e-12:
            lon_intervals = [(-180.0, 180.0)]
        else:
            dlon = dlat / min_cos
            if dlon >= 180.0:
                lon_intervals = [(-180.0, 180.0)]
            else:
                lo, hi = center.lon - dlon, center.lon + dlon
                if lo < -180.0:
                    lon_intervals = [(-180.0, hi), (lo + 360.0, 180.0)]
                elif hi > 180.0:
                    lon_intervals = [(lo, 180.0), (-180.0, hi - 360.0)]
                else:
                    lon_intervals = [(lo, hi)]

    out = []
    lat_cells = range(math.floor(lat_lo / c), math.floor(lat_hi / c) + 1)
    for (a, b) in lon_intervals:
        for i in lat_cells:
            for j in range(math.floor(a / c), math.floor(b / c) + 1):
                out.extend(index.cells.get((i, j), ()))
    return out


def query_radius(index: GridIndex, center: GeoPoint, r_km: float) -> set:
    """All ids within r_km of center (boundary inclusive)."""
    if r_km < 0:
        raise ValidationError(f"r_km must be >= 0, got {r_km}")
    return {
        pid
        for pid in _candidate_ids(index, center, r_km)
        if haversine_km(index.points[pid], center) <= r_km
    }


def query_knn(index: GridIndex, center: GeoPoint, k: int) -> list:
    """The min(k, N) nearest ids, ordered by (distance, id)."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    n = len(index.points)
    if n == 0:
        return []
    # grow the search radius until enough candidates are strictly inside,
    # so nothing nearer can be hiding in an unscanned cell
    r = max(index.cell_size_deg * KM_PER_DEG_LAT, 1.0)
    half_circumference = math.pi * EARTH_RADIUS_KM
    while True:
        hits = query_radius(index, center, r)
        if len(hits) >= min(k, n) or r >= half_circumference:
            break
        r *= 2.0
    ranked = sorted(hits, key=lambda pid: (haversine_km(index.points[pid], center), pid))
    return ranked[: min(k, n)]
