"""OD-pair graphs: zone table, pair index and the seven adjacency matrices.

Every vertex is an ordered (origin zone, destination zone) pair. Four
relations are modelled (neighborhood, functional similarity, centroid
distance, mobility correlation); the first three come in an origin and a
destination flavour, giving seven raw N x N matrices. Each raw matrix is
symmetric, zero on the diagonal and bounded to [0, 1]; the normalized form
used by the graph convolutions is ``D^-1/2 (A + I) D^-1/2``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import container
from .errors import ContractError, DataError, IngestionError

EARTH_RADIUS_KM = 6371.0

GRAPH_NAMES = (
    "neighborhood_origin",
    "neighborhood_destination",
    "functional_origin",
    "functional_destination",
    "distance_origin",
    "distance_destination",
    "mobility",
)

_PROVENANCE = {
    "neighborhood_origin": ("neighborhood", "origin"),
    "neighborhood_destination": ("neighborhood", "destination"),
    "functional_origin": ("functional", "origin"),
    "functional_destination": ("functional", "destination"),
    "distance_origin": ("distance", "origin"),
    "distance_destination": ("distance", "destination"),
    "mobility": ("mobility", "pair"),
}


@dataclass(frozen=True)
class Zone:
    id: int
    lat: float
    lng: float
    features: tuple[float, ...]
    neighbors: frozenset[int] = frozenset()


@dataclass(frozen=True)
class GraphConfig:
    feature_eps: float = 1e-6
    distance_eps_km: float = 0.01
    standardize_features: bool = True


class ODPairIndex:
    """Ordered list of (origin, destination) zone pairs with reverse lookup."""

    def __init__(self, pairs: Iterable[tuple[int, int]]):
        self.pairs: list[tuple[int, int]] = [(int(o), int(d)) for o, d in pairs]
        self._lookup = {p: i for i, p in enumerate(self.pairs)}
        if len(self._lookup) != len(self.pairs):
            raise DataError("duplicate OD pair in index")

    @classmethod
    def all_pairs(cls, zone_ids: Sequence[int]) -> "ODPairIndex":
        """Every ordered pair over ``zone_ids``, origin-major."""
        return cls((o, d) for o in zone_ids for d in zone_ids)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self._lookup

    def index(self, origin: int, destination: int) -> int:
        return self._lookup[(origin, destination)]

    def get(self, origin: int, destination: int, default=None):
        return self._lookup.get((origin, destination), default)

    def zone_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for o, d in self.pairs:
            seen.setdefault(o)
            seen.setdefault(d)
        return list(seen)

    def side(self, side: str) -> list[int]:
        if side == "origin":
            return [o for o, _ in self.pairs]
        if side == "destination":
            return [d for _, d in self.pairs]
        raise ContractError(f"side must be 'origin' or 'destination', got {side!r}")

    def validate(self, zones: Mapping[int, Zone]) -> None:
        missing = sorted({z for p in self.pairs for z in p if z not in zones})
        if missing:
            raise IngestionError(f"OD pairs reference unknown zone ids {missing}")


# ---------------------------------------------------------------- zone table


def validate_zones(zones: Mapping[int, Zone]) -> None:
    widths = {len(z.features) for z in zones.values()}
    if len(widths) > 1:
        raise IngestionError(f"zones carry feature vectors of different lengths {sorted(widths)}")
    for z in zones.values():
        _check_coord(z.lat, z.lng)
        if not all(math.isfinite(f) for f in z.features):
            raise IngestionError(f"zone {z.id}: non-finite land-use feature")
        if z.id in z.neighbors:
            raise IngestionError(f"zone {z.id} lists itself as a neighbor")
        for n in z.neighbors:
            if n not in zones:
                raise IngestionError(f"zone {z.id}: unknown neighbor {n}")
            if z.id not in zones[n].neighbors:
                raise IngestionError(f"neighbor relation not symmetric: {z.id} -> {n}")


def read_zones(path: str | Path) -> dict[int, Zone]:
    """Parse the zone metadata file.

    Header: ``id, centroid_lat, centroid_lng, <feature columns...>, neighbors``
    where ``neighbors`` is a semicolon-separated list of zone ids.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot read zone file {path}: {exc}") from exc
    zones: dict[int, Zone] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty zone file")
        header = [h.strip() for h in header]
        if header[:3] != ["id", "centroid_lat", "centroid_lng"] or header[-1] != "neighbors":
            raise IngestionError(
                f"{path}: header must be id,centroid_lat,centroid_lng,<features>,neighbors"
            )
        n_feat = len(header) - 4
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                zid = int(row[0])
                lat, lng = float(row[1]), float(row[2])
                feats = tuple(float(v) for v in row[3 : 3 + n_feat])
                nbrs = frozenset(int(v) for v in row[-1].split(";") if v.strip())
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
            if zid in zones:
                raise IngestionError(f"{path}:{lineno}: duplicate zone id {zid}")
            zones[zid] = Zone(zid, lat, lng, feats, nbrs)
    validate_zones(zones)
    return zones


def write_zones(path: str | Path, zones: Mapping[int, Zone], feature_names: Sequence[str] | None = None) -> None:
    width = len(next(iter(zones.values())).features) if zones else 0
    names = list(feature_names) if feature_names else [f"feature_{k}" for k in range(width)]
    lines = [",".join(["id", "centroid_lat", "centroid_lng", *names, "neighbors"])]
    for z in zones.values():
        cells = [str(z.id), repr(z.lat), repr(z.lng), *(repr(f) for f in z.features)]
        cells.append(";".join(str(n) for n in sorted(z.neighbors)))
        lines.append(",".join(cells))
    container.atomic_write(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------- adjacency builders


def _check_coord(lat: float, lng: float) -> None:
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lng <= 180.0):
        raise IngestionError(f"coordinate out of range: lat={lat}, lng={lng}")


def haversine(lat1: float, lng1: float, lat2: float, lng2: float) -> float:
    """Great-circle distance in kilometers between two points given in degrees."""
    for lat, lng in ((lat1, lng1), (lat2, lng2)):
        _check_coord(lat, lng)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lng2 - lng1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))


def _side_zones(pairs: ODPairIndex, zones: Mapping[int, Zone], side: str) -> list[Zone]:
    ids = pairs.side(side)
    try:
        return [zones[z] for z in ids]
    except KeyError as exc:
        raise IngestionError(f"unknown zone id {exc.args[0]}") from None


def _expand(pairs: ODPairIndex, zones: Mapping[int, Zone], side: str, zone_matrix: dict) -> np.ndarray:
    """Lift a zone-by-zone matrix to the pair-by-pair matrix for one side."""
    side_ids = pairs.side(side)
    order = sorted(set(side_ids))
    pos = {z: k for k, z in enumerate(order)}
    Z = zone_matrix(order)
    idx = np.array([pos[z] for z in side_ids])
    return Z[np.ix_(idx, idx)]


def _minmax_offdiag(A: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    out = np.zeros_like(A)
    if n < 2:
        return out
    off = ~np.eye(n, dtype=bool)
    vals = A[off]
    lo, hi = vals.min(), vals.max()
    if hi > lo:
        out[off] = (vals - lo) / (hi - lo)
    else:
        out[off] = 1.0
    return out


def neighborhood_adjacency(pairs: ODPairIndex, zones: Mapping[int, Zone], side: str) -> np.ndarray:
    """1 where the side-zones of two pairs are distinct and share a boundary."""
    _side_zones(pairs, zones, side)

    def zone_matrix(order):
        Z = np.zeros((len(order), len(order)))
        for a, za in enumerate(order):
            for b, zb in enumerate(order):
                if zb in zones[za].neighbors:
                    Z[a, b] = 1.0
        return Z

    A = _expand(pairs, zones, side, zone_matrix)
    np.fill_diagonal(A, 0.0)
    return A


def standardized_features(zones: Mapping[int, Zone], zone_ids: Sequence[int]) -> dict[int, np.ndarray]:
    """Per-component z-scores over ``zone_ids``; constant components become 0."""
    F = np.array([zones[z].features for z in zone_ids], dtype=np.float64)
    if not np.all(np.isfinite(F)):
        raise IngestionError("non-finite land-use feature")
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd == 0] = 1.0
    Fz = (F - mu) / sd
    return {z: Fz[k] for k, z in enumerate(zone_ids)}


def functional_similarity_adjacency(
    pairs: ODPairIndex, zones: Mapping[int, Zone], side: str, config: GraphConfig = GraphConfig()
) -> np.ndarray:
    """Inverse land-use feature distance, clamped then min-max scaled."""
    _side_zones(pairs, zones, side)
    if config.standardize_features:
        feats = standardized_features(zones, pairs.zone_ids())
    else:
        feats = {z: np.asarray(zones[z].features, dtype=np.float64) for z in pairs.zone_ids()}
        if not all(np.all(np.isfinite(v)) for v in feats.values()):
            raise IngestionError("non-finite land-use feature")

    def zone_matrix(order):
        F = np.array([feats[z] for z in order])
        diff = F[:, None, :] - F[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        return 1.0 / np.maximum(dist, config.feature_eps)

    return _minmax_offdiag(_expand(pairs, zones, side, zone_matrix))


def centroid_distance_adjacency(
    pairs: ODPairIndex, zones: Mapping[int, Zone], side: str, config: GraphConfig = GraphConfig()
) -> np.ndarray:
    """Inverse haversine distance between side centroids, clamped then scaled."""
    _side_zones(pairs, zones, side)

    def zone_matrix(order):
        n = len(order)
        Z = np.empty((n, n))
        for a in range(n):
            za = zones[order[a]]
            for b in range(n):
                zb = zones[order[b]]
                Z[a, b] = haversine(za.lat, za.lng, zb.lat, zb.lng)
        return 1.0 / np.maximum(Z, config.distance_eps_km)

    return _minmax_offdiag(_expand(pairs, zones, side, zone_matrix))


def mobility_correlation_adjacency(series: np.ndarray) -> np.ndarray:
    """Pearson correlation of historical pair series, negatives clamped to 0.

    ``series`` is ``[N, L]`` (one row per pair). Rows with zero variance
    correlate 0 with everything.
    """
    Q = np.asarray(series, dtype=np.float64)
    if Q.ndim != 2:
        raise DataError(f"history must be [pairs, length], got shape {Q.shape}")
    if Q.shape[1] < 2:
        raise DataError("mobility correlation needs at least 2 historical intervals")
    C = Q - Q.mean(axis=1, keepdims=True)
    ss = np.sum(C * C, axis=1)
    live = ss > 0
    norm = np.where(live, np.sqrt(np.where(live, ss, 1.0)), 1.0)
    Cn = C / norm[:, None]
    R = Cn @ Cn.T
    R[~live, :] = 0.0
    R[:, ~live] = 0.0
    R = np.clip(R, 0.0, 1.0)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 0.0)
    return R


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"adjacency must be square, got {A.shape}")
    if np.any(A < 0):
        raise ContractError("adjacency has negative entries; clamp before normalizing")
    At = A + np.eye(A.shape[0])
    inv_sqrt = 1.0 / np.sqrt(At.sum(axis=1))
    # one product per entry keeps the result exactly symmetric
    return At * np.outer(inv_sqrt, inv_sqrt)


# ---------------------------------------------------------------- graph set


@dataclass
class ODGraphSet:
    pairs: ODPairIndex
    raw: dict[str, np.ndarray]
    normalized: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.raw)

    @property
    def K(self) -> int:
        return len(self.raw)

    @property
    def N(self) -> int:
        return len(self.pairs)

    def stack(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Normalized matrices as a ``[K, N, N]`` array."""
        names = list(names) if names is not None else self.names
        return np.stack([self.normalized[n] for n in names])

    def save(self, path) -> None:
        arrays = {"pairs": np.array(self.pairs.pairs, dtype=np.float64).reshape(-1, 2)}
        for n in self.names:
            arrays[f"raw/{n}"] = self.raw[n]
        for n in self.names:
            arrays[f"norm/{n}"] = self.normalized[n]
        meta = dict(self.meta)
        meta["names"] = self.names
        meta["provenance"] = {n: list(_PROVENANCE.get(n, ("custom", "pair"))) for n in self.names}
        container.save(path, "graph_set", arrays, meta)

    @classmethod
    def load(cls, path) -> "ODGraphSet":
        arrays, meta = container.load(path, expect_kind="graph_set")
        names = meta.pop("names")
        meta.pop("provenance", None)
        pairs = ODPairIndex((int(o), int(d)) for o, d in arrays["pairs"])
        raw = {n: arrays[f"raw/{n}"] for n in names}
        norm = {n: arrays[f"norm/{n}"] for n in names}
        return cls(pairs, raw, norm, meta)


def check_raw_matrix(A: np.ndarray, name: str = "adjacency", tol: float = 0.0) -> None:
    """Raise if ``A`` is not symmetric, zero-diagonal and inside [0, 1]."""
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"{name}: not square {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError(f"{name}: non-finite entries")
    if np.max(np.abs(A - A.T), initial=0.0) > tol:
        raise ContractError(f"{name}: not symmetric")
    if np.any(np.diag(A) != 0):
        raise ContractError(f"{name}: non-zero diagonal")
    if A.size and (A.min() < 0 or A.max() > 1):
        raise ContractError(f"{name}: entries outside [0, 1]")


def build_graph_set(
    pairs: ODPairIndex,
    zones: Mapping[int, Zone],
    history: np.ndarray,
    config: GraphConfig = GraphConfig(),
) -> ODGraphSet:
    """Build all seven raw matrices and their normalized forms.

    ``history`` holds the per-pair demand series, either ``[N, L]`` or a
    demand cube array ``[days, intervals, N]`` which is flattened in time.
    """
    pairs.validate(zones)
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 3:
        history = history.reshape(-1, history.shape[-1]).T
    if history.shape[0] != len(pairs):
        raise DataError(f"history covers {history.shape[0]} pairs, index has {len(pairs)}")
    raw = {
        "neighborhood_origin": neighborhood_adjacency(pairs, zones, "origin"),
        "neighborhood_destination": neighborhood_adjacency(pairs, zones, "destination"),
        "functional_origin": functional_similarity_adjacency(pairs, zones, "origin", config),
        "functional_destination": functional_similarity_adjacency(pairs, zones, "destination", config),
        "distance_origin": centroid_distance_adjacency(pairs, zones, "origin", config),
        "distance_destination": centroid_distance_adjacency(pairs, zones, "destination", config),
        "mobility": mobility_correlation_adjacency(history),
    }
    for name, A in raw.items():
        check_raw_matrix(A, name)
    normalized = {name: normalize_adjacency(A) for name, A in raw.items()}
    meta = {
        "feature_eps": config.feature_eps,
        "distance_eps_km": config.distance_eps_km,
        "standardize_features": config.standardize_features,
    }
    return ODGraphSet(pairs, raw, normalized, meta)
