"""Trip ingestion, the demand cube and lag-window instances.

The demand cube holds counts ``values[day, interval, pair]``. A training
instance for target cell (d, t) carries the four lagged demand vectors
``[X(d-7,t), X(d-1,t), X(d,t-2), X(d,t-1)]`` as an N x 4 matrix.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import container
from .errors import ConfigError, DataError, IngestionError
from .graphs import ODPairIndex

LAG_COLUMNS = ("week", "day", "interval_minus_2", "interval_minus_1")
MIN_DAYS = 8

_TRIP_COLUMNS = ("pickup_datetime", "pulocationid", "dolocationid")


class TripRecord(NamedTuple):
    pickup_time: dt.datetime
    pickup_zone: int
    dropoff_zone: int


@dataclass
class IngestReport:
    accepted: int = 0
    out_of_range: int = 0
    residual: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "out_of_range": self.out_of_range,
            "residual": self.residual,
            "rejected_count": len(self.rejected),
            "rejected": [{"line": ln, "reason": why} for ln, why in self.rejected],
        }


@dataclass
class DemandCube:
    values: np.ndarray  # [days, intervals, pairs]
    interval_length: int
    start_date: dt.date
    pairs: ODPairIndex

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"demand cube must be 3-D, got shape {self.values.shape}")
        if 1440 % self.interval_length:
            raise ConfigError(f"interval length {self.interval_length} does not divide 1440")
        if self.values.shape[1] != 1440 // self.interval_length:
            raise DataError(
                f"cube has {self.values.shape[1]} intervals/day, expected {1440 // self.interval_length}"
            )
        if self.values.shape[2] != len(self.pairs):
            raise DataError(f"cube covers {self.values.shape[2]} pairs, index has {len(self.pairs)}")

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def intervals_per_day(self) -> int:
        return self.values.shape[1]

    @property
    def N(self) -> int:
        return self.values.shape[2]

    def date_of(self, day: int) -> dt.date:
        return self.start_date + dt.timedelta(days=day)

    def day_of(self, date: dt.date) -> int:
        return (date - self.start_date).days

    def series(self) -> np.ndarray:
        """Per-pair history flattened in time, shape ``[N, days*intervals]``."""
        return self.values.reshape(-1, self.N).T.copy()

    def filter_pairs(self, min_total: float) -> "DemandCube":
        """Keep only pairs whose total demand reaches ``min_total``."""
        keep = np.nonzero(self.values.sum(axis=(0, 1)) >= min_total)[0]
        if keep.size == 0:
            raise DataError(f"no OD pair has total demand >= {min_total}")
        pairs = ODPairIndex(self.pairs.pairs[i] for i in keep)
        return DemandCube(self.values[:, :, keep], self.interval_length, self.start_date, pairs)

    def save(self, path) -> None:
        container.save(
            path,
            "demand_cube",
            {"values": self.values, "pairs": np.array(self.pairs.pairs, dtype=np.float64).reshape(-1, 2)},
            {"interval_length": self.interval_length, "start_date": self.start_date.isoformat()},
        )

    @classmethod
    def load(cls, path) -> "DemandCube":
        arrays, meta = container.load(path, expect_kind="demand_cube")
        pairs = ODPairIndex((int(o), int(d)) for o, d in arrays["pairs"])
        return cls(
            arrays["values"],
            int(meta["interval_length"]),
            dt.date.fromisoformat(meta["start_date"]),
            pairs,
        )


@dataclass(frozen=True)
class TrainingInstance:
    features: np.ndarray  # [N, 4]
    target: np.ndarray  # [N]
    key: tuple[int, int]  # (day, interval)


# ---------------------------------------------------------------- ingestion


def parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1]
    ts = dt.datetime.fromisoformat(text)
    return ts.replace(tzinfo=None)


def iter_trips(path: str | Path, report: IngestReport | None = None) -> Iterator[TripRecord]:
    """Stream trip records from a delimited file with a header row.

    Required columns (case-insensitive): pickup_datetime, PULocationID,
    DOLocationID. Malformed rows are recorded in ``report.rejected`` with
    their 1-based line number and skipped.
    """
    report = report if report is not None else IngestReport()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"cannot read trip file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        lowered = [h.strip().lower() for h in header]
        try:
            cols = [lowered.index(c) for c in _TRIP_COLUMNS]
        except ValueError:
            raise IngestionError(
                f"{path}: header must contain pickup_datetime, PULocationID, DOLocationID"
            ) from None
        width = max(cols) + 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < width:
                report.rejected.append((lineno, "too few columns"))
                continue
            try:
                ts = parse_timestamp(row[cols[0]])
                pu = int(float(row[cols[1]]))
                do = int(float(row[cols[2]]))
            except ValueError as exc:
                report.rejected.append((lineno, str(exc)))
                continue
            yield TripRecord(ts, pu, do)


def aggregate_demand(
    records: Iterable[TripRecord],
    pairs: ODPairIndex,
    interval_length: int,
    start_date: dt.date,
    end_date: dt.date,
    report: IngestReport | None = None,
) -> DemandCube:
    """Count trips per (day, interval, pair) over ``start_date..end_date`` inclusive."""
    if interval_length <= 0 or 1440 % interval_length:
        raise ConfigError(f"interval length {interval_length} does not divide 1440")
    n_days = (end_date - start_date).days + 1
    if n_days <= 0:
        raise ConfigError(f"empty date range {start_date}..{end_date}")
    report = report if report is not None else IngestReport()
    per_day = 1440 // interval_length
    values = np.zeros((n_days, per_day, len(pairs)))
    for rec in records:
        day = (rec.pickup_time.date() - start_date).days
        if day < 0 or day >= n_days:
            report.out_of_range += 1
            continue
        i = pairs.get(rec.pickup_zone, rec.dropoff_zone)
        if i is None:
            report.residual += 1
            continue
        minute = rec.pickup_time.hour * 60 + rec.pickup_time.minute
        values[day, minute // interval_length, i] += 1.0
        report.accepted += 1
    return DemandCube(values, interval_length, start_date, pairs)


# ---------------------------------------------------------------- instances


def lag_cells(d: int, t: int, per_day: int, wrap: bool = True) -> list[tuple[int, int]] | None:
    """The four (day, interval) cells feeding target (d, t), or None if unavailable."""
    cells = [(d - 7, t), (d - 1, t)]
    for k in (2, 1):
        if t - k >= 0:
            cells.append((d, t - k))
        elif wrap:
            cells.append((d - 1, per_day + t - k))
        else:
            return None
    if any(day < 0 for day, _ in cells):
        return None
    return cells


def window_features(cube: DemandCube, d: int, t: int, wrap: bool = True) -> np.ndarray | None:
    """Lag features ``[N, 4]`` for target (d, t); the target itself may lie past the cube."""
    if not 0 <= t < cube.intervals_per_day:
        return None
    cells = lag_cells(d, t, cube.intervals_per_day, wrap)
    if cells is None or any(day >= cube.n_days for day, _ in cells):
        return None
    return np.stack([cube.values[day, ivl] for day, ivl in cells], axis=1)


def extract_window(cube: DemandCube, d: int, t: int, wrap: bool = True) -> TrainingInstance | None:
    if not 0 <= d < cube.n_days:
        return None
    feats = window_features(cube, d, t, wrap)
    if feats is None:
        return None
    return TrainingInstance(feats, cube.values[d, t].copy(), (d, t))


def earliest_missing(cube: DemandCube, d: int, t: int, wrap: bool = True) -> tuple[int, int] | None:
    """First lag cell of (d, t) that lies outside the cube, or None."""
    cells = [(d - 7, t), (d - 1, t)]
    for k in (2, 1):
        if t - k >= 0 or not wrap:
            cells.append((d, t - k))
        else:
            cells.append((d - 1, cube.intervals_per_day + t - k))
    bad = [c for c in cells if not (0 <= c[0] < cube.n_days and 0 <= c[1] < cube.intervals_per_day)]
    return min(bad) if bad else None


def build_dataset(cube: DemandCube, wrap: bool = True) -> list[TrainingInstance]:
    """Every valid (d, t) instance in chronological order."""
    if cube.n_days < MIN_DAYS:
        raise DataError(f"need at least {MIN_DAYS} days of demand, cube has {cube.n_days}")
    out = []
    for d in range(7, cube.n_days):
        for t in range(cube.intervals_per_day):
            inst = extract_window(cube, d, t, wrap)
            if inst is not None:
                out.append(inst)
    return out


def split_dataset(
    instances: Sequence[TrainingInstance],
    ratio: float | None = None,
    boundary_day: int | None = None,
) -> tuple[list[TrainingInstance], list[TrainingInstance]]:
    """Chronological split by fraction or by last training day (inclusive)."""
    if (ratio is None) == (boundary_day is None):
        raise ConfigError("give exactly one of ratio or boundary_day")
    ordered = sorted(instances, key=lambda inst: inst.key)
    if ratio is not None:
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
        cut = int(math.floor(ratio * len(ordered) + 1e-9))
    else:
        cut = sum(1 for inst in ordered if inst.key[0] <= boundary_day)
    train, test = list(ordered[:cut]), list(ordered[cut:])
    if not train or not test:
        raise ConfigError(f"split leaves an empty side ({len(train)} train / {len(test)} test)")
    return train, test


def stack_instances(instances: Sequence[TrainingInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Features ``[B, N, 4]`` and targets ``[B, N]``."""
    X = np.stack([inst.features for inst in instances])
    Y = np.stack([inst.target for inst in instances])
    return X, Y
