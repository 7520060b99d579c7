"""Synthetic cities with planted origin/destination demand structure.

Zones sit on a small lattice of Manhattan-like coordinates with rook
contiguity. Demand for pair (o, d) in cell (day, interval) is Poisson with
rate::

    scale * P_o(t) * Q_d(t) * exp(u_o(s) + v_d(s) + w(day)) * decay(dist(o, d))

where P, Q are fixed daily profiles per zone, u and v are AR(1) shocks per
origin and per destination zone on the continuous interval clock s, and w is
a slowly wandering day-level effect. Pairs sharing an origin (or a
destination) therefore share shocks, which is the spatial structure the
graphs are meant to expose.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DemandCube
from .container import atomic_write
from .graphs import ODPairIndex, Zone, write_zones

BASE_LAT = 40.758
BASE_LNG = -73.985
SPACING_DEG = 0.012
FEATURE_NAMES = (
    "households_without_car",
    "housing_units",
    "population",
    "employment",
    "road_density",
    "distance_to_transit",
)


@dataclass
class SyntheticCity:
    zones: dict[int, Zone]
    pairs: ODPairIndex
    cube: DemandCube
    rate: np.ndarray  # expected counts, same shape as cube.values


def lattice_zones(n_zones: int, rng: np.random.Generator, first_id: int = 1) -> dict[int, Zone]:
    cols = int(np.ceil(np.sqrt(n_zones)))
    coords = {}
    for k in range(n_zones):
        r, c = divmod(k, cols)
        coords[first_id + k] = (r, c)
    zones = {}
    for zid, (r, c) in coords.items():
        nbrs = frozenset(
            other for other, (r2, c2) in coords.items() if abs(r - r2) + abs(c - c2) == 1
        )
        lat = BASE_LAT + SPACING_DEG * r + rng.normal(0, 0.001)
        lng = BASE_LNG + SPACING_DEG * c + rng.normal(0, 0.001)
        # land-use measures per unit area: households w/o car, housing, population,
        # employment, road density, meters to transit
        feats = tuple(float(v) for v in rng.gamma(2.0, 1.0, size=6))
        zones[zid] = Zone(zid, float(lat), float(lng), feats, nbrs)
    return zones


def _daily_profile(rng: np.random.Generator, per_day: int) -> np.ndarray:
    hours = np.arange(per_day) * 24.0 / per_day
    am, pm = rng.uniform(0.2, 1.0, size=2)
    prof = 0.15 + am * np.exp(-0.5 * ((hours - 8.5) / 1.5) ** 2) + pm * np.exp(-0.5 * ((hours - 18.0) / 2.0) ** 2)
    return prof / prof.mean()


def _ar1(rng: np.random.Generator, n: int, length: int, phi: float, sigma: float) -> np.ndarray:
    out = np.zeros((n, length))
    innov = rng.normal(0.0, sigma * np.sqrt(1 - phi**2), size=(n, length))
    out[:, 0] = rng.normal(0.0, sigma, size=n)
    for s in range(1, length):
        out[:, s] = phi * out[:, s - 1] + innov[:, s]
    return out


def generate_city(
    n_zones: int = 6,
    n_days: int = 60,
    interval_length: int = 60,
    seed: int = 0,
    scale: float = 6.0,
    shock_phi: float = 0.85,
    shock_sigma: float = 0.35,
    day_sigma: float = 0.25,
    start_date: dt.date = dt.date(2018, 1, 1),
) -> SyntheticCity:
    rng = np.random.default_rng(seed)
    zones = lattice_zones(n_zones, rng)
    ids = list(zones)
    pairs = ODPairIndex.all_pairs(ids)
    per_day = 1440 // interval_length
    T = n_days * per_day

    prof_o = np.stack([_daily_profile(rng, per_day) for _ in ids])
    prof_d = np.stack([_daily_profile(rng, per_day) for _ in ids])
    mass_o = rng.lognormal(0.0, 0.4, size=len(ids))
    mass_d = rng.lognormal(0.0, 0.4, size=len(ids))
    u = _ar1(rng, len(ids), T, shock_phi, shock_sigma)
    v = _ar1(rng, len(ids), T, shock_phi, shock_sigma)
    w = _ar1(rng, 1, n_days, 0.7, day_sigma)[0]

    pos = {z: k for k, z in enumerate(ids)}
    rate = np.zeros((n_days, per_day, len(pairs)))
    for i, (o, d) in enumerate(pairs):
        a, b = pos[o], pos[d]
        za, zb = zones[o], zones[d]
        dist = np.hypot(za.lat - zb.lat, za.lng - zb.lng) / SPACING_DEG
        decay = np.exp(-0.35 * dist)
        series = (
            scale
            * mass_o[a]
            * mass_d[b]
            * decay
            * np.tile(prof_o[a] * prof_d[b], n_days)
            * np.exp(u[a] + v[b] + np.repeat(w, per_day))
        )
        rate[:, :, i] = series.reshape(n_days, per_day)
    counts = rng.poisson(rate).astype(np.float64)
    cube = DemandCube(counts, interval_length, start_date, pairs)
    return SyntheticCity(zones, pairs, cube, rate)


def trips_csv(cube: DemandCube, seed: int = 0) -> str:
    """Expand cube counts into trip rows (pickup time uniform inside its interval)."""
    rng = np.random.default_rng(seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pickup_datetime", "PULocationID", "DOLocationID"])
    L = cube.interval_length
    for day in range(cube.n_days):
        date = cube.date_of(day)
        for t in range(cube.intervals_per_day):
            for i in np.nonzero(cube.values[day, t])[0]:
                o, d = cube.pairs.pairs[i]
                for _ in range(int(cube.values[day, t, i])):
                    sec = int(rng.integers(0, L * 60))
                    stamp = dt.datetime.combine(date, dt.time()) + dt.timedelta(minutes=t * L, seconds=sec)
                    writer.writerow([stamp.strftime("%Y-%m-%d %H:%M:%S"), o, d])
    return buf.getvalue()


def write_dataset(directory: str | Path, city: SyntheticCity, seed: int = 0) -> tuple[Path, Path]:
    """Write ``trips.csv`` and ``zones.csv`` for ``city`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trips, zones = directory / "trips.csv", directory / "zones.csv"
    atomic_write(trips, trips_csv(city.cube, seed))
    write_zones(zones, city.zones, FEATURE_NAMES)
    return trips, zones
