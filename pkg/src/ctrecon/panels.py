"""Bottom-level demand panels: trip-record ingestion and synthetic generation.

A panel is a balanced (node x slot) grid of non-negative integer counts on a
regular intra-day slot scheme. Panels come either from trip records (one
timestamped event per row, pre-assigned to a spatial cell) or from a seeded
synthetic generator with daily/weekly seasonality and optional level shifts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "SlotScheme",
    "Panel",
    "TripRecord",
    "IngestReport",
    "ShiftSpec",
    "SyntheticConfig",
    "ingest_trips",
    "read_trips_csv",
    "apply_station_map",
    "merge_panels",
    "generate_synthetic",
    "window_slice",
    "panel_to_csv",
    "panel_from_csv",
    "round_half_away",
]

CITIBIKE_SCHEME_SLOTS = 48  # 0:00-23:30 half-hour slots
DELIVERY_SCHEME_SLOTS = 34  # 7:00-23:30 half-hour slots


@dataclass(frozen=True)
class SlotScheme:
    """Intra-day slot grid: first slot start, slot length, slots per day."""

    start_minute: int
    slot_minutes: int
    slots_per_day: int

    def __post_init__(self):
        if self.slot_minutes < 1 or self.slots_per_day < 1:
            raise ValueError("slot length and count must be positive")
        last_end = self.start_minute + self.slot_minutes * self.slots_per_day
        if self.start_minute < 0 or last_end > 24 * 60:
            raise ValueError("slot window must fit inside one day")

    def slot_of(self, when: datetime) -> int | None:
        """Slot index for a timestamp, or None when outside the day window."""
        minute = when.hour * 60 + when.minute
        offset = minute - self.start_minute
        if offset < 0:
            return None
        slot = offset // self.slot_minutes
        return int(slot) if slot < self.slots_per_day else None


def citibike_scheme() -> SlotScheme:
    return SlotScheme(start_minute=0, slot_minutes=30, slots_per_day=CITIBIKE_SCHEME_SLOTS)


def delivery_scheme() -> SlotScheme:
    return SlotScheme(start_minute=7 * 60, slot_minutes=30, slots_per_day=DELIVERY_SCHEME_SLOTS)


@dataclass(frozen=True)
class Panel:
    """Balanced bottom-level count panel: rows nodes, columns slots."""

    nodes: tuple[str, ...]
    start_date: date
    scheme: SlotScheme
    values: np.ndarray

    def __init__(self, nodes, start_date, scheme, values):
        values = np.asarray(values)
        if not np.issubdtype(values.dtype, np.integer):
            if not np.all(values == np.round(values)):
                raise ValueError("panel values must be integers")
            values = values.astype(np.int64)
        else:
            values = values.astype(np.int64)
        if values.ndim != 2 or values.shape[0] != len(tuple(nodes)):
            raise ValueError(
                f"values shape {values.shape} does not match {len(tuple(nodes))} nodes"
            )
        if values.shape[1] % scheme.slots_per_day:
            raise ValueError(
                f"slot count {values.shape[1]} not divisible by "
                f"{scheme.slots_per_day} slots/day"
            )
        if (values < 0).any():
            raise ValueError("panel values must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "start_date", start_date)
        object.__setattr__(self, "scheme", scheme)
        object.__setattr__(self, "values", values)

    @property
    def m(self) -> int:
        return self.scheme.slots_per_day

    @property
    def days(self) -> int:
        return self.values.shape[1] // self.m

    @property
    def n_slots(self) -> int:
        return self.values.shape[1]

    def timestamps(self) -> list[datetime]:
        out = []
        for d in range(self.days):
            day = self.start_date + timedelta(days=d)
            for s in range(self.m):
                minute = self.scheme.start_minute + s * self.scheme.slot_minutes
                out.append(datetime(day.year, day.month, day.day, minute // 60, minute % 60))
        return out

    def date_of_day(self, day_index: int) -> date:
        return self.start_date + timedelta(days=int(day_index))

    def grand_total(self) -> int:
        return int(self.values.sum())

    def series(self, node: str) -> np.ndarray:
        return self.values[self.nodes.index(node)]


@dataclass(frozen=True)
class TripRecord:
    """One demand event: start timestamp and pre-assigned spatial cell."""

    started_at: datetime
    cell_id: str


@dataclass
class IngestReport:
    records_read: int = 0
    records_kept: int = 0
    dropped_out_of_window: int = 0
    dropped_unknown_cell: int = 0
    dropped_unparseable: int = 0

    @property
    def records_dropped(self) -> int:
        return (
            self.dropped_out_of_window
            + self.dropped_unknown_cell
            + self.dropped_unparseable
        )


def ingest_trips(
    records: Iterable[tuple[str, str]],
    cells: Sequence[str],
    scheme: SlotScheme,
    start_date: date | None = None,
    days: int | None = None,
) -> tuple[Panel, IngestReport]:
    """Count trip records into a (cell x slot) panel.

    ``records`` yields (timestamp string, cell id) pairs; timestamps parse as
    ISO-8601. Records with unknown cells or unparseable timestamps are
    skipped and counted; records outside the day window or the date range
    count as out-of-window. When ``start_date``/``days`` are omitted the
    range is derived from the kept records.
    """
    cells = tuple(cells)
    cell_rows = {c: i for i, c in enumerate(cells)}
    report = IngestReport()
    hits: list[tuple[date, int, int]] = []  # (date, slot, row)

    for raw_ts, cell in records:
        report.records_read += 1
        try:
            when = datetime.fromisoformat(str(raw_ts).strip().replace("Z", "+00:00"))
        except (ValueError, TypeError):
            report.dropped_unparseable += 1
            continue
        when = when.replace(tzinfo=None)
        if cell not in cell_rows:
            report.dropped_unknown_cell += 1
            continue
        slot = scheme.slot_of(when)
        if slot is None:
            report.dropped_out_of_window += 1
            continue
        hits.append((when.date(), slot, cell_rows[cell]))

    if start_date is None or days is None:
        if not hits:
            raise ValueError(
                "no usable records and no explicit date range: "
                "pass start_date and days"
            )
        dates = [h[0] for h in hits]
        start_date = min(dates)
        days = (max(dates) - start_date).days + 1

    values = np.zeros((len(cells), days * scheme.slots_per_day), dtype=np.int64)
    for when_date, slot, row in hits:
        day = (when_date - start_date).days
        if 0 <= day < days:
            values[row, day * scheme.slots_per_day + slot] += 1
            report.records_kept += 1
        else:
            report.dropped_out_of_window += 1

    return Panel(cells, start_date, scheme, values), report


def read_trips_csv(path) -> Iterator[tuple[str, str]]:
    """Yield (started_at, cell_id) pairs from a header-ed trips CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "started_at" not in reader.fieldnames:
            raise ValueError(f"{path}: expected columns started_at,cell_id")
        for row in reader:
            yield row["started_at"], row.get("cell_id", "")


def apply_station_map(
    records: Iterable[tuple[str, str]], station_to_cell: Mapping[str, str]
) -> Iterator[tuple[str, str]]:
    """Translate station ids to cell ids; unknown stations pass through
    (they will be counted as unknown cells downstream)."""
    for ts, station in records:
        yield ts, station_to_cell.get(station, station)


def read_station_map_csv(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "station_id" not in reader.fieldnames:
            raise ValueError(f"{path}: expected columns station_id,cell_id")
        return {row["station_id"]: row["cell_id"] for row in reader}


def merge_panels(a: Panel, b: Panel) -> Panel:
    """Elementwise sum of two shards covering the same grid."""
    if a.nodes != b.nodes or a.start_date != b.start_date or a.scheme != b.scheme:
        raise ValueError("panels cover different grids")
    if a.values.shape != b.values.shape:
        raise ValueError("panels cover different ranges")
    return Panel(a.nodes, a.start_date, a.scheme, a.values + b.values)


@dataclass(frozen=True)
class ShiftSpec:
    """Abrupt persistent level change for a subset of nodes."""

    nodes: tuple[str, ...]
    shift_date: date
    multiplier: float

    def __init__(self, nodes, shift_date, multiplier):
        multiplier = float(multiplier)
        if not np.isfinite(multiplier) or multiplier < 0:
            raise ValueError(f"multiplier must be finite and >= 0, got {multiplier}")
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "shift_date", shift_date)
        object.__setattr__(self, "multiplier", multiplier)


@dataclass(frozen=True)
class SyntheticConfig:
    """Seeded synthetic demand panel with seasonality and optional shift.

    Slot mean = node level * profile[slot] * week_multipliers[weekday]
    (* shift multiplier once the shift date is reached for affected nodes).
    ``noise="poisson"`` draws counts; ``noise="none"`` rounds the mean.
    """

    node_levels: Mapping[str, float]
    days: int
    profile: Sequence[float]
    week_multipliers: Sequence[float] = (1.0,) * 7
    scheme: SlotScheme | None = None
    noise: str = "poisson"
    shift: ShiftSpec | None = None
    seed: int = 0
    start_date: date = date(2023, 1, 2)  # a Monday


def generate_synthetic(config: SyntheticConfig) -> Panel:
    scheme = config.scheme or SlotScheme(
        start_minute=0,
        slot_minutes=(24 * 60) // len(tuple(config.profile)),
        slots_per_day=len(tuple(config.profile)),
    )
    profile = np.asarray(config.profile, dtype=float)
    if len(profile) != scheme.slots_per_day:
        raise ValueError(
            f"profile length {len(profile)} != {scheme.slots_per_day} slots/day"
        )
    week = np.asarray(config.week_multipliers, dtype=float)
    if len(week) != 7:
        raise ValueError("week_multipliers must have length 7")
    if config.noise not in ("poisson", "none"):
        raise ValueError(f"unknown noise law {config.noise!r}")

    nodes = tuple(config.node_levels)
    levels = np.array([config.node_levels[n] for n in nodes], dtype=float)
    m = scheme.slots_per_day

    day_mult = np.array(
        [week[(config.start_date + timedelta(days=d)).weekday()] for d in range(config.days)]
    )
    # means: (node, day*m) grid before any shift
    means = levels[:, None] * np.tile(profile, config.days)[None, :]
    means *= np.repeat(day_mult, m)[None, :]

    if config.shift is not None:
        offset = (config.shift.shift_date - config.start_date).days
        if not 0 <= offset < config.days:
            raise ValueError(
                f"shift date {config.shift.shift_date} outside panel range"
            )
        rows = [nodes.index(n) for n in config.shift.nodes]
        means[np.ix_(rows, range(offset * m, config.days * m))] *= config.shift.multiplier

    if config.noise == "poisson":
        rng = np.random.default_rng(config.seed)
        values = rng.poisson(means)
    else:
        values = np.maximum(0, round_half_away(means))
    return Panel(nodes, config.start_date, scheme, values)


def window_slice(panel: Panel, start_day: int, length_days: int) -> Panel:
    """Contiguous sub-panel of whole days; slot alignment preserved."""
    if start_day < 0 or length_days < 1 or start_day + length_days > panel.days:
        raise ValueError(
            f"slice [{start_day}, {start_day + length_days}) outside "
            f"panel of {panel.days} days"
        )
    m = panel.m
    return Panel(
        panel.nodes,
        panel.start_date + timedelta(days=start_day),
        panel.scheme,
        panel.values[:, start_day * m : (start_day + length_days) * m],
    )


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (the tie rule used for all count rounding)."""
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def clip_round(x: np.ndarray) -> np.ndarray:
    """max(0, round-half-away) — forecasts become valid counts."""
    return np.maximum(0, round_half_away(x))


def panel_to_csv(panel: Panel, path) -> None:
    """First column slot timestamp, one integer column per bottom node."""
    stamps = panel.timestamps()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", *panel.nodes])
        for j, ts in enumerate(stamps):
            writer.writerow([ts.isoformat(), *panel.values[:, j].tolist()])


def panel_from_csv(path) -> Panel:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp":
            raise ValueError(f"{path}: expected first column 'timestamp'")
        nodes = tuple(header[1:])
        stamps: list[datetime] = []
        rows: list[list[int]] = []
        for row in reader:
            if not row:
                continue
            stamps.append(datetime.fromisoformat(row[0]))
            rows.append([int(v) for v in row[1:]])
    if not stamps:
        raise ValueError(f"{path}: empty panel")
    start_date = stamps[0].date()
    slots_per_day = sum(1 for ts in stamps if ts.date() == start_date)
    if len(stamps) % slots_per_day:
        raise ValueError(f"{path}: ragged panel ({len(stamps)} rows, {slots_per_day}/day)")
    if slots_per_day > 1:
        slot_minutes = int((stamps[1] - stamps[0]).total_seconds() // 60)
    else:
        slot_minutes = 24 * 60
    scheme = SlotScheme(
        start_minute=stamps[0].hour * 60 + stamps[0].minute,
        slot_minutes=slot_minutes,
        slots_per_day=slots_per_day,
    )
    values = np.array(rows, dtype=np.int64).T
    return Panel(nodes, start_date, scheme, values)
