"""Spatial network: locations, haversine travel-time matrices, city generation.

Location id 0 is always the depot. Travel times are built once per
experiment and are immutable afterwards; every structure here is safe to
share across threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0

# degrees of latitude per kilometre on the mean-radius sphere
_DEG_PER_KM = 180.0 / (math.pi * EARTH_RADIUS_KM)


@dataclass(frozen=True)
class Location:
    """A map point; ``weight`` is the sampling frequency of order destinations."""

    id: int
    lat: float
    lon: float
    weight: float = 1.0


class TravelTimeMatrix:
    """Asymmetric travel minutes, ``minutes[i, j]`` leaving i toward j."""

    def __init__(self, minutes: np.ndarray):
        minutes = np.asarray(minutes, dtype=float)
        if minutes.ndim != 2 or minutes.shape[0] != minutes.shape[1]:
            raise ValueError("travel-time matrix must be square")
        if not np.all(np.isfinite(minutes)) or np.any(minutes < 0):
            raise ValueError("travel-time entries must be finite and >= 0")
        if np.any(np.diagonal(minutes) != 0.0):
            raise ValueError("travel-time diagonal must be zero")
        self._minutes = minutes
        self._minutes.setflags(write=False)

    @property
    def minutes(self) -> np.ndarray:
        return self._minutes

    @property
    def n_locations(self) -> int:
        return self._minutes.shape[0]

    def __getitem__(self, ij) -> float:
        return float(self._minutes[ij])

    def __eq__(self, other) -> bool:
        return isinstance(other, TravelTimeMatrix) and np.array_equal(
            self._minutes, other._minutes
        )


def _check_latlon(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0):
        raise ValueError(f"latitude {lat} outside [-90, 90]")
    if not (-180.0 <= lon <= 180.0):
        raise ValueError(f"longitude {lon} outside [-180, 180]")


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between (lat, lon) pairs."""
    lat1, lon1 = a
    lat2, lon2 = b
    _check_latlon(lat1, lon1)
    _check_latlon(lat2, lon2)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2.0) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def build_travel_times(
    locations: list[Location],
    speed_kmh: float = 20.0,
    noise_fraction: float = 0.10,
    seed: int = 0,
) -> TravelTimeMatrix:
    """Pairwise travel minutes with directional noise.

    Each ordered pair gets an independent uniform [0, noise_fraction]
    multiplicative bump, fixed for the lifetime of the matrix.
    """
    if speed_kmh <= 0:
        raise ValueError(f"speed_kmh must be positive, got {speed_kmh}")
    if not (0.0 <= noise_fraction <= 1.0):
        raise ValueError(f"noise_fraction must be in [0, 1], got {noise_fraction}")
    n = len(locations)
    base = np.zeros((n, n))
    for i, a in enumerate(locations):
        for j, b in enumerate(locations):
            if i < j:
                d = haversine_km((a.lat, a.lon), (b.lat, b.lon))
                base[i, j] = base[j, i] = d / speed_kmh * 60.0
    rng = np.random.default_rng(seed)
    noise = rng.uniform(0.0, noise_fraction, size=(n, n)) if noise_fraction > 0 else np.zeros((n, n))
    minutes = base * (1.0 + noise)
    np.fill_diagonal(minutes, 0.0)
    return TravelTimeMatrix(minutes)


def load_locations(path, synthesize_depot: bool = False) -> list[Location]:
    """Read a ``id,lat,lon,weight`` CSV into a validated location list.

    With ``synthesize_depot`` a missing id-0 row is created at the weighted
    centroid of the delivery points; otherwise it is an error.
    """
    rows: dict[int, Location] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["id", "lat", "lon", "weight"]:
            raise ValueError(f"{path}: expected header 'id,lat,lon,weight'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                loc_id = int(row[0])
                lat, lon, weight = float(row[1]), float(row[2]), float(row[3])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from None
            if loc_id in rows:
                raise ValueError(f"{path}:{lineno}: duplicate id {loc_id}")
            _check_latlon(lat, lon)
            if loc_id != 0 and weight < 0:
                raise ValueError(f"{path}:{lineno}: negative weight")
            rows[loc_id] = Location(loc_id, lat, lon, weight if loc_id != 0 else 0.0)

    if 0 not in rows:
        if not synthesize_depot:
            raise ValueError(f"{path}: no depot row (id 0) and synthesis disabled")
        deliv = [rows[k] for k in sorted(rows)]
        wsum = sum(l.weight for l in deliv)
        if wsum <= 0:
            raise ValueError(f"{path}: cannot place depot, delivery weights sum to 0")
        lat0 = sum(l.lat * l.weight for l in deliv) / wsum
        lon0 = sum(l.lon * l.weight for l in deliv) / wsum
        rows[0] = Location(0, lat0, lon0, 0.0)

    ids = sorted(rows)
    if ids != list(range(len(ids))):
        raise ValueError(f"{path}: ids must be contiguous 0..{len(ids) - 1}, got {ids}")
    locs = [rows[i] for i in ids]
    if len(locs) > 1 and sum(l.weight for l in locs[1:]) <= 0:
        raise ValueError(f"{path}: delivery-point weights must sum to a positive value")
    return locs


def save_locations(path, locations: list[Location]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lat", "lon", "weight"])
        for loc in locations:
            writer.writerow([loc.id, repr(loc.lat), repr(loc.lon), repr(loc.weight)])


def save_matrix(path, matrix: TravelTimeMatrix) -> None:
    """Row-major CSV of minutes with 6 decimal places."""
    with open(path, "w", newline="") as fh:
        for row in matrix.minutes:
            fh.write(",".join(f"{v:.6f}" for v in row))
            fh.write("\n")


def load_matrix(path) -> TravelTimeMatrix:
    with open(path) as fh:
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return TravelTimeMatrix(np.array(rows))


def generate_city(
    n_locations: int,
    spread_km: float = 6.0,
    cluster_count: int = 3,
    seed: int = 0,
    base_lat: float = 0.0,
    base_lon: float = 0.0,
) -> list[Location]:
    """Synthetic city: depot at the reference coordinate, clustered delivery points.

    Delivery points come from ``cluster_count`` Gaussian clusters, all within
    ``spread_km`` of the depot; weights are heavy-tailed (lognormal).
    """
    if n_locations < 2:
        raise ValueError("need at least a depot and one delivery point")
    if spread_km <= 0:
        raise ValueError("spread_km must be positive")
    if cluster_count < 1:
        raise ValueError("cluster_count must be >= 1")
    rng = np.random.default_rng(seed)
    n_points = n_locations - 1
    k = min(cluster_count, n_points)
    centers = []
    for _ in range(k):
        ang = rng.uniform(0.0, 2.0 * math.pi)
        rad = rng.uniform(0.2, 0.6) * spread_km
        centers.append((rad * math.cos(ang), rad * math.sin(ang)))
    sd = spread_km / 5.0
    locs = [Location(0, base_lat, base_lon, 0.0)]
    cos_base = math.cos(math.radians(base_lat))
    for i in range(n_points):
        cx, cy = centers[i % k]
        for _ in range(64):
            x = cx + rng.normal(0.0, sd)
            y = cy + rng.normal(0.0, sd)
            if math.hypot(x, y) <= spread_km:
                break
        else:
            r = math.hypot(x, y)
            x, y = x / r * spread_km * 0.98, y / r * spread_km * 0.98
        weight = float(rng.lognormal(0.0, 1.0))
        locs.append(
            Location(
                i + 1,
                base_lat + y * _DEG_PER_KM,
                base_lon + x * _DEG_PER_KM / max(1e-9, cos_base),
                weight,
            )
        )
    return locs
