"""Trip-record ingestion: CSV parsing, grid merging, request batching, horizon split."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .base import InputError, Request
from .graph import CityGraph


@dataclass(frozen=True)
class BBox:
    min_lon: float
    min_lat: float
    max_lon: float
    max_lat: float

    @classmethod
    def parse(cls, text: str) -> "BBox":
        """Parse ``min_lon,min_lat,max_lon,max_lat``."""
        try:
            vals = [float(x) for x in text.split(",")]
        except ValueError:
            raise InputError(f"bad bbox {text!r}") from None
        if len(vals) != 4 or vals[0] >= vals[2] or vals[1] >= vals[3]:
            raise InputError(f"bad bbox {text!r}; expected min_lon,min_lat,max_lon,max_lat")
        return cls(*vals)

    def contains(self, lon: float, lat: float) -> bool:
        return self.min_lon <= lon <= self.max_lon and self.min_lat <= lat <= self.max_lat


# Rough Manhattan box; override with --bbox.
MANHATTAN = BBox(-74.03, 40.69, -73.90, 40.88)


@dataclass(frozen=True)
class ColumnMap:
    """Header names for the required fields; defaults follow the public yellow-taxi schema.

    If ``travel_time`` is empty, travel time is derived from the dropoff timestamp.
    """

    pickup_time: str = "tpep_pickup_datetime"
    dropoff_time: str = "tpep_dropoff_datetime"
    pickup_lon: str = "pickup_longitude"
    pickup_lat: str = "pickup_latitude"
    dropoff_lon: str = "dropoff_longitude"
    dropoff_lat: str = "dropoff_latitude"
    travel_time: str = ""


@dataclass(frozen=True, slots=True)
class RawTrip:
    pickup_time: datetime
    pickup_lon: float
    pickup_lat: float
    dropoff_lon: float
    dropoff_lat: float
    travel_time: float


@dataclass
class DropReport:
    rows: int = 0
    malformed: int = 0
    out_of_bbox: int = 0
    time_filtered: int = 0
    same_node: int = 0
    sampled_out: int = 0

    @property
    def parsed(self) -> int:
        return self.rows - self.malformed - self.out_of_bbox

    @property
    def dropped(self) -> int:
        return self.malformed + self.out_of_bbox + self.time_filtered + self.same_node + self.sampled_out


def _parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        return datetime.strptime(text, "%m/%d/%Y %I:%M:%S %p")


def parse_trip_records(
    path: str | Path, bbox: BBox = MANHATTAN, columns: ColumnMap = ColumnMap()
) -> tuple[list[RawTrip], DropReport]:
    """Read a comma-separated trip file. Rows outside ``bbox`` or unparseable are counted and skipped."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"trip file not found: {path}")
    report = DropReport()
    trips: list[RawTrip] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or [])
        needed = [columns.pickup_time, columns.pickup_lon, columns.pickup_lat, columns.dropoff_lon, columns.dropoff_lat]
        needed.append(columns.travel_time or columns.dropoff_time)
        missing = [c for c in needed if c not in header]
        if missing:
            raise InputError(f"{path}: missing required columns {missing}")
        for row in reader:
            report.rows += 1
            try:
                t0 = _parse_time(row[columns.pickup_time])
                plon, plat = float(row[columns.pickup_lon]), float(row[columns.pickup_lat])
                dlon, dlat = float(row[columns.dropoff_lon]), float(row[columns.dropoff_lat])
                if columns.travel_time:
                    tt = float(row[columns.travel_time])
                else:
                    tt = (_parse_time(row[columns.dropoff_time]) - t0).total_seconds()
                if not all(map(math.isfinite, (plon, plat, dlon, dlat, tt))) or tt < 0:
                    raise ValueError("non-finite field")
            except (ValueError, TypeError, KeyError):
                report.malformed += 1
                continue
            if not (bbox.contains(plon, plat) and bbox.contains(dlon, dlat)):
                report.out_of_bbox += 1
                continue
            trips.append(RawTrip(t0, plon, plat, dlon, dlat, tt))
    return trips, report


def write_trip_records(path: str | Path, trips: Iterable[RawTrip], columns: ColumnMap = ColumnMap(travel_time="travel_time")) -> None:
    """Inverse of :func:`parse_trip_records` (used for fixtures and round trips)."""
    names = [columns.pickup_time, columns.pickup_lon, columns.pickup_lat, columns.dropoff_lon, columns.dropoff_lat]
    names.append(columns.travel_time or columns.dropoff_time)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for tr in trips:
            last = repr(float(tr.travel_time)) if columns.travel_time else ""
            coords = (tr.pickup_lon, tr.pickup_lat, tr.dropoff_lon, tr.dropoff_lat)
            w.writerow([tr.pickup_time.isoformat(), *(repr(float(c)) for c in coords), last])


def filter_time_window(trips: Sequence[RawTrip], window: str, report: DropReport | None = None) -> list[RawTrip]:
    """Keep trips whose pickup clock time lies in ``HH:MM-HH:MM`` (end exclusive)."""
    try:
        a, b = (time.fromisoformat(x.strip()) for x in window.split("-"))
    except ValueError:
        raise InputError(f"bad time filter {window!r}; expected HH:MM-HH:MM") from None
    if a <= b:
        keep = [tr for tr in trips if a <= tr.pickup_time.time() < b]
    else:
        keep = [tr for tr in trips if tr.pickup_time.time() >= a or tr.pickup_time.time() < b]
    if report is not None:
        report.time_filtered += len(trips) - len(keep)
    return keep


class NodeMap:
    """Maps coordinates to node ids by snapping to square cells of side ``merge_radius`` degrees."""

    def __init__(self, merge_radius: float, cells: Sequence[tuple[int, int]]):
        self.merge_radius = merge_radius
        self.cells = list(cells)
        self._index = {c: i for i, c in enumerate(self.cells)}

    def cell_of(self, lon: float, lat: float) -> tuple[int, int]:
        return (math.floor(lon / self.merge_radius), math.floor(lat / self.merge_radius))

    def node_of(self, lon: float, lat: float) -> int:
        try:
            return self._index[self.cell_of(lon, lat)]
        except KeyError:
            raise InputError(f"coordinate ({lon}, {lat}) is not covered by the node map") from None

    def __len__(self) -> int:
        return len(self.cells)


def build_graph(trips: Sequence[RawTrip], merge_radius: float) -> tuple[CityGraph, NodeMap]:
    """Grid-merge trip endpoints into nodes; arc length is the mean observed travel time."""
    if not merge_radius > 0:
        raise InputError(f"merge_radius must be positive, got {merge_radius}")
    if not trips:
        raise InputError("build_graph needs at least one trip")
    probe = NodeMap(merge_radius, [])
    cells = set()
    for tr in trips:
        cells.add(probe.cell_of(tr.pickup_lon, tr.pickup_lat))
        cells.add(probe.cell_of(tr.dropoff_lon, tr.dropoff_lat))
    node_map = NodeMap(merge_radius, sorted(cells))
    sums: dict[tuple[int, int], list[float]] = defaultdict(lambda: [0.0, 0])
    for tr in trips:
        i = node_map.node_of(tr.pickup_lon, tr.pickup_lat)
        j = node_map.node_of(tr.dropoff_lon, tr.dropoff_lat)
        if i != j:
            acc = sums[(i, j)]
            acc[0] += tr.travel_time
            acc[1] += 1
    edges = {k: total / count for k, (total, count) in sums.items()}
    return CityGraph(len(node_map), edges), node_map


@dataclass(frozen=True)
class Timeline:
    """Requests ordered by (timestep, id) over steps ``0..n_steps-1``."""

    requests: tuple[Request, ...]
    n_steps: int
    _by_step: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        reqs = tuple(sorted(self.requests, key=lambda r: (r.t, r.id)))
        object.__setattr__(self, "requests", reqs)
        by_step: dict[int, list[Request]] = defaultdict(list)
        for r in reqs:
            if not 0 <= r.t < self.n_steps:
                raise InputError(f"request {r.id} at t={r.t} outside horizon 0..{self.n_steps - 1}")
            by_step[r.t].append(r)
        object.__setattr__(self, "_by_step", dict(by_step))

    def batch(self, t: int) -> list[Request]:
        return list(self._by_step.get(t, ()))

    def between(self, start: int, stop: int) -> list[Request]:
        """Requests with ``start <= t < stop``."""
        return [r for t in range(start, stop) for r in self._by_step.get(t, ())]

    def counts(self) -> np.ndarray:
        out = np.zeros(self.n_steps, dtype=int)
        for t, rs in self._by_step.items():
            out[t] = len(rs)
        return out

    def __len__(self) -> int:
        return len(self.requests)

    def save(self, path: str | Path) -> None:
        lines = ["t_r,s_r,d_r"] + [f"{r.t},{r.s},{r.d}" for r in self.requests]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, n_steps: int | None = None) -> "Timeline":
        path = Path(path)
        if not path.exists():
            raise InputError(f"requests file not found: {path}")
        reqs = []
        for k, ln in enumerate(path.read_text().splitlines()):
            ln = ln.strip()
            if not ln or ln.startswith("t_r"):
                continue
            try:
                t, s, d = (int(x) for x in ln.split(","))
            except ValueError:
                raise InputError(f"{path}:{k + 1}: expected 't_r,s_r,d_r'") from None
            reqs.append(Request(len(reqs), t, s, d))
        span = max((r.t for r in reqs), default=-1) + 1
        return cls(tuple(reqs), n_steps if n_steps is not None else span)


def build_request_timeline(
    trips: Sequence[RawTrip],
    node_map: NodeMap,
    batch_seconds: float = 60.0,
    t_start: datetime | None = None,
    report: DropReport | None = None,
) -> Timeline:
    """Bucket trips into ``floor((pickup - t_start) / batch_seconds)`` steps; drop same-node trips."""
    if not batch_seconds > 0:
        raise InputError(f"batch_seconds must be positive, got {batch_seconds}")
    if not trips:
        return Timeline((), 0)
    if t_start is None:
        t_start = min(tr.pickup_time for tr in trips)
    reqs = []
    for tr in trips:
        s = node_map.node_of(tr.pickup_lon, tr.pickup_lat)
        d = node_map.node_of(tr.dropoff_lon, tr.dropoff_lat)
        if s == d:
            if report is not None:
                report.same_node += 1
            continue
        t = math.floor((tr.pickup_time - t_start).total_seconds() / batch_seconds)
        if t < 0:
            raise InputError(f"trip at {tr.pickup_time} precedes t_start {t_start}")
        reqs.append((t, s, d))
    # ids follow file order within the timeline
    requests = tuple(Request(i, t, s, d) for i, (t, s, d) in enumerate(reqs))
    span = max((r.t for r in requests), default=-1) + 1
    return Timeline(requests, span)


def stratified_sample(timeline: Timeline, rate: float, seed: int, report: DropReport | None = None) -> Timeline:
    """Uniform subsampling within each timestep (stratum = timestep)."""
    if not 0 < rate <= 1:
        raise InputError(f"sample rate must be in (0, 1], got {rate}")
    if rate == 1:
        return timeline
    rng = np.random.default_rng(seed)
    kept = []
    for t in range(timeline.n_steps):
        batch = timeline.batch(t)
        if not batch:
            continue
        k = int(round(rate * len(batch)))
        idx = np.sort(rng.choice(len(batch), size=k, replace=False))
        kept.extend(batch[i] for i in idx)
    if report is not None:
        report.sampled_out += len(timeline) - len(kept)
    return Timeline(tuple(kept), timeline.n_steps)


@dataclass(frozen=True)
class HorizonSplit:
    """Historical ``[t0-delta, t0)``, current ``t0``, future ``(t0, t0+n]`` segments."""

    delta: int
    n: int
    t0: int
    historical: tuple[Request, ...]
    current: tuple[Request, ...]
    future: tuple[Request, ...]

    @property
    def historical_steps(self) -> range:
        return range(self.t0 - self.delta, self.t0)

    @property
    def future_steps(self) -> range:
        return range(self.t0 + 1, self.t0 + 1 + self.n)


def split_horizon(timeline: Timeline, delta: int, n: int, start: int = 0) -> HorizonSplit:
    """First ``delta`` steps from ``start`` are historical, the next is current, the next ``n`` future."""
    if delta < 0 or n < 0:
        raise InputError("delta and n must be nonnegative")
    if timeline.n_steps - start < delta + 1 + n:
        raise InputError(
            f"timeline spans {timeline.n_steps - start} steps from {start}; need delta + 1 + n = {delta + 1 + n}"
        )
    t0 = start + delta
    return HorizonSplit(
        delta=delta,
        n=n,
        t0=t0,
        historical=tuple(timeline.between(start, t0)),
        current=tuple(timeline.batch(t0)),
        future=tuple(timeline.between(t0 + 1, t0 + 1 + n)),
    )
