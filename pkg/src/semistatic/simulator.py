"""Ground-truth semi-static dynamics, observation noise and visibility masking.

Times are seconds; week time 0 is Monday 00:00. Schedule files use hours.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .filter import NoiseModel

HOUR_S = 3600.0
DAY_S = 24 * HOUR_S
WEEK_S = 7 * DAY_S
DAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
CSV_HEADER = ("time_s", "feature_id", "receptacle_id", "gt", "observed")


@dataclass(frozen=True)
class ObservationSeries:
    timestamps: np.ndarray
    values: np.ndarray
    feature_id: str = ""

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float)
        vs = np.asarray(self.values, dtype=int)
        if ts.shape != vs.shape:
            raise ValueError("timestamps and values differ in length")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vs)

    def __len__(self):
        return len(self.timestamps)

    def window(self, start: float, end: float) -> ObservationSeries:
        keep = (self.timestamps >= start) & (self.timestamps < end)
        return ObservationSeries(self.timestamps[keep], self.values[keep], self.feature_id)


def parse_hours(value) -> float:
    """Accept 7.5 or "07:30"."""
    if isinstance(value, str):
        hh, mm = value.split(":")
        return int(hh) + int(mm) / 60.0
    return float(value)


def parse_day(value) -> int:
    if isinstance(value, str):
        return DAY_NAMES.index(value[:3].title())
    return int(value)


@dataclass(frozen=True)
class WeeklySchedule:
    """Active hours per weekday; weekend days (and shifted days) share one pattern."""

    feature_id: str
    weekday_intervals: tuple[tuple[int, float, float], ...] = ()
    weekend_days: frozenset = frozenset({5, 6})
    weekend_intervals: tuple[tuple[float, float], ...] = ()
    receptacle_id: str = ""

    def __post_init__(self):
        wd = tuple((parse_day(d), parse_hours(a), parse_hours(b)) for d, a, b in self.weekday_intervals)
        we = tuple((parse_hours(a), parse_hours(b)) for a, b in self.weekend_intervals)
        for d, a, b in wd:
            if not 0 <= d <= 6:
                raise ValueError(f"day index {d} outside 0..6")
            _check_hours(a, b)
        for a, b in we:
            _check_hours(a, b)
        object.__setattr__(self, "weekday_intervals", wd)
        object.__setattr__(self, "weekend_intervals", we)
        object.__setattr__(self, "weekend_days", frozenset(parse_day(d) for d in self.weekend_days))

    @classmethod
    def daily(cls, feature_id, weekday_hours, weekend_hours=(), receptacle_id="", weekend_days=(5, 6)):
        """Same weekday intervals on every working day."""
        days = [d for d in range(7) if d not in set(weekend_days)]
        return cls(feature_id, tuple((d, a, b) for d in days for a, b in weekday_hours),
                   frozenset(weekend_days), tuple(weekend_hours), receptacle_id)

    def active(self, day: int, hour: float, shifted: frozenset = frozenset()) -> bool:
        if day in self.weekend_days or day in shifted:
            return any(a <= hour < b for a, b in self.weekend_intervals)
        return any(d == day and a <= hour < b for d, a, b in self.weekday_intervals)

    def to_dict(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "receptacle_id": self.receptacle_id,
            "weekday_intervals": [[d, a, b] for d, a, b in self.weekday_intervals],
            "weekend_days": sorted(self.weekend_days),
            "weekend_intervals": [[a, b] for a, b in self.weekend_intervals],
        }

    @classmethod
    def from_dict(cls, data: dict) -> WeeklySchedule:
        return cls(
            feature_id=str(data["feature_id"]),
            weekday_intervals=tuple(tuple(x) for x in data.get("weekday_intervals", ())),
            weekend_days=frozenset(data.get("weekend_days", (5, 6))),
            weekend_intervals=tuple(tuple(x) for x in data.get("weekend_intervals", ())),
            receptacle_id=str(data.get("receptacle_id", "")),
        )


def _check_hours(a: float, b: float):
    if not (0 <= a < b <= 24):
        raise ValueError(f"interval {a}-{b} must satisfy 0 <= start < end <= 24")


def tick_times(span_weeks: float, tick: float = HOUR_S, start: float = 0.0,
               hours: tuple[float, float] | None = None) -> np.ndarray:
    """Sampling instants; ``hours=(9, 17)`` keeps only ticks inside that daily window (inclusive)."""
    if tick <= 0:
        raise ValueError("tick must be positive")
    n = int(round(span_weeks * WEEK_S / tick))
    ts = start + tick * np.arange(n)
    if hours is not None:
        hod = np.mod(ts, DAY_S) / HOUR_S
        ts = ts[(hod >= hours[0] - 1e-9) & (hod <= hours[1] + 1e-9)]
    return ts


def generate_weekly(
    schedule: WeeklySchedule,
    span_weeks: float,
    tick: float = HOUR_S,
    long_weekend: Iterable[int] | None = None,
    start: float = 0.0,
    hours: tuple[float, float] | None = None,
) -> ObservationSeries:
    """Ground-truth presence at every tick; days in ``long_weekend`` follow the weekend pattern."""
    shifted = frozenset(parse_day(d) for d in (long_weekend or ()))
    ts = tick_times(span_weeks, tick, start, hours)
    week_t = np.mod(ts, WEEK_S)
    days = (week_t // DAY_S).astype(int)
    hod = np.mod(week_t, DAY_S) / HOUR_S
    values = np.array([schedule.active(int(d), float(h), shifted) for d, h in zip(days, hod)], dtype=int)
    return ObservationSeries(ts, values, schedule.feature_id)


def add_noise(series: ObservationSeries, noise: NoiseModel, seed=None) -> ObservationSeries:
    """Flip 1 -> 0 with probability p_miss and 0 -> 1 with probability p_false."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(len(series))
    v = series.values
    flip = np.where(v == 1, u < noise.p_miss, u < noise.p_false)
    return ObservationSeries(series.timestamps, np.where(flip, 1 - v, v), series.feature_id)


def feature_seed(master_seed: int, feature_id: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{feature_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# hierarchical Markov schedules


def _check_stochastic(m: np.ndarray, name: str):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be a square matrix")
    if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > 1e-9):
        raise ValueError(f"{name} rows must be non-negative and sum to 1")


@dataclass(frozen=True)
class HierarchicalSchedule:
    """Nested Markov schedule.

    ``levels`` lists (name, length in hours) from coarse to fine, e.g.
    ``[("week", 168), ("day", 24)]``. Each level has a pattern chain; at every
    boundary of a level its next pattern is drawn from the current pattern's
    row. The finest level's pattern picks which receptacle matrix is in force
    (one matrix broadcasts to all patterns). Stays last a uniform number of
    hours within the receptacle's bounds. ``absent`` names the receptacle index
    that means "not in the scene", if any.
    """

    receptacles: tuple[str, ...]
    receptacle_transitions: tuple[np.ndarray, ...]
    duration_bounds: tuple[tuple[float, float], ...]
    levels: tuple[tuple[str, float], ...] = ()
    level_transition_matrices: tuple[np.ndarray, ...] = ()
    absent: int | None = None
    initial: int = 0

    def __post_init__(self):
        if isinstance(self.receptacle_transitions, np.ndarray) and self.receptacle_transitions.ndim == 2:
            mats = (self.receptacle_transitions,)
        else:
            mats = tuple(np.asarray(m, dtype=float) for m in self.receptacle_transitions)
        mats = tuple(np.asarray(m, dtype=float) for m in mats)
        n = len(self.receptacles)
        for m in mats:
            _check_stochastic(m, "receptacle transition matrix")
            if m.shape[0] != n:
                raise ValueError("receptacle matrix size does not match the receptacle list")
        lv = tuple(np.asarray(m, dtype=float) for m in self.level_transition_matrices)
        for m in lv:
            _check_stochastic(m, "level transition matrix")
        if len(lv) != len(self.levels):
            raise ValueError("need one transition matrix per level")
        if lv and len(mats) not in (1, lv[-1].shape[0]):
            raise ValueError("need one receptacle matrix per finest-level pattern, or a single one")
        if len(self.duration_bounds) != n:
            raise ValueError("need duration bounds for every receptacle")
        for lo, hi in self.duration_bounds:
            if not 0 < lo <= hi:
                raise ValueError(f"duration bounds must satisfy 0 < min <= max, got {(lo, hi)}")
        object.__setattr__(self, "receptacle_transitions", mats)
        object.__setattr__(self, "level_transition_matrices", lv)
        object.__setattr__(self, "duration_bounds", tuple((float(a), float(b)) for a, b in self.duration_bounds))
        object.__setattr__(self, "levels", tuple((str(a), float(b)) for a, b in self.levels))

    def matrix_for(self, pattern: int) -> np.ndarray:
        return self.receptacle_transitions[0 if len(self.receptacle_transitions) == 1 else pattern]

    @classmethod
    def from_dict(cls, data: dict) -> HierarchicalSchedule:
        recs = tuple(data["receptacles"])
        rt = data["receptacle_transitions"]
        mats = (np.asarray(rt, dtype=float),) if np.ndim(rt) == 2 else tuple(np.asarray(m, dtype=float) for m in rt)
        return cls(
            receptacles=recs,
            receptacle_transitions=mats,
            duration_bounds=tuple(tuple(b) for b in data["duration_bounds"]),
            levels=tuple(tuple(x) for x in data.get("levels", ())),
            level_transition_matrices=tuple(np.asarray(m, dtype=float) for m in data.get("level_transition_matrices", ())),
            absent=data.get("absent"),
            initial=int(data.get("initial", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "receptacles": list(self.receptacles),
            "receptacle_transitions": [m.tolist() for m in self.receptacle_transitions],
            "duration_bounds": [list(b) for b in self.duration_bounds],
            "levels": [list(x) for x in self.levels],
            "level_transition_matrices": [m.tolist() for m in self.level_transition_matrices],
            "absent": self.absent,
            "initial": self.initial,
        }


def generate_hierarchical(h: HierarchicalSchedule, span_weeks: float, tick: float = HOUR_S, seed=None,
                          start: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-tick receptacle index for one object. Returns (timestamps, receptacle indices)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ts = tick_times(span_weeks, tick, start)
    out = np.empty(len(ts), dtype=int)
    patterns = [0] * len(h.levels)
    level_len = [length * HOUR_S for _, length in h.levels]
    current = h.initial

    def draw_stay(rec):
        lo, hi = h.duration_bounds[rec]
        return max(rng.uniform(lo, hi) * HOUR_S, tick)

    remaining = draw_stay(current)
    for i, t in enumerate(ts):
        if i > 0:
            for lvl, length in enumerate(level_len):
                if round((t - start) / tick) % round(length / tick) == 0:
                    row = h.level_transition_matrices[lvl][patterns[lvl]]
                    patterns[lvl] = int(rng.choice(len(row), p=row))
            remaining -= tick
            if remaining <= 1e-9:
                row = h.matrix_for(patterns[-1] if patterns else 0)[current]
                current = int(rng.choice(len(row), p=row))
                remaining = draw_stay(current)
        out[i] = current
    return ts, out


# ---------------------------------------------------------------------------
# visibility masking and dataset splits


class PrivilegedCell(IntEnum):
    PRESENT = 1
    ABSENT = 0
    HIDDEN = -1
    INVALID = -2


def privileged_view(gt: int, receptacle_id, visible_receptacles, valid_pairs=None, object_id=None,
                    object_visible: bool | None = None) -> PrivilegedCell:
    """Mask a ground-truth cell by what the camera can currently see.

    ``valid_pairs`` (set of (object, receptacle)) marks which pairs can
    occur at all; ``None`` means every pair is valid. A present object is
    assumed visible whenever its receptacle is, unless ``object_visible``
    says otherwise.
    """
    if valid_pairs is not None and (object_id, receptacle_id) not in valid_pairs:
        return PrivilegedCell.INVALID
    if receptacle_id not in visible_receptacles:
        return PrivilegedCell.HIDDEN
    if gt:
        visible = True if object_visible is None else object_visible
        return PrivilegedCell.PRESENT if visible else PrivilegedCell.HIDDEN
    return PrivilegedCell.ABSENT


def split_dataset(series: Sequence[ObservationSeries], weeks: tuple[int, int, int], start: float = 0.0,
                  week: float = WEEK_S):
    """Chronological (train, val, test) split at week boundaries counted from ``start``."""
    if any(w < 0 for w in weeks):
        raise ValueError("week counts must be non-negative")
    total = sum(weeks)
    for s in series:
        if len(s) == 0:
            raise ValueError(f"series {s.feature_id!r} is empty")
        step = float(np.median(np.diff(s.timestamps))) if len(s) > 1 else 0.0
        covered = s.timestamps[-1] + step - start
        if covered < total * week - 1e-6:
            raise ValueError(f"series {s.feature_id!r} spans {covered / week:.2f} weeks, need {total}")
    edges = start + week * np.cumsum([0, *weeks])
    return tuple([s.window(edges[i], edges[i + 1]) for s in series] for i in range(3))


# ---------------------------------------------------------------------------
# CSV dataset files


@dataclass
class DatasetRow:
    time_s: float
    feature_id: str
    receptacle_id: str
    gt: int
    observed: int


def write_dataset(path, rows: Iterable[DatasetRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow((repr(float(r.time_s)), r.feature_id, r.receptacle_id, int(r.gt), int(r.observed)))


def read_dataset(path) -> list[DatasetRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        rows = []
        for rec in reader:
            observed = int(rec["observed"])
            if observed not in (0, 1, -1, -2):
                raise ValueError(f"{path}: observed code {observed} not in {{0,1,-1,-2}}")
            rows.append(DatasetRow(float(rec["time_s"]), rec["feature_id"], rec["receptacle_id"],
                                   int(rec["gt"]), observed))
    return rows


@dataclass
class FeatureData:
    """One feature's columns from a dataset file."""

    feature_id: str
    receptacle_id: str
    times: np.ndarray = field(repr=False)
    gt: np.ndarray = field(repr=False)
    observed: np.ndarray = field(repr=False)

    @property
    def key(self) -> str:
        return series_key(self.feature_id, self.receptacle_id)

    def ground_truth(self) -> ObservationSeries:
        return ObservationSeries(self.times, self.gt, self.feature_id)

    def observations(self) -> ObservationSeries:
        keep = self.observed >= 0
        return ObservationSeries(self.times[keep], self.observed[keep], self.feature_id)

    def window(self, start: float, end: float) -> FeatureData:
        keep = (self.times >= start) & (self.times < end)
        return FeatureData(self.feature_id, self.receptacle_id, self.times[keep], self.gt[keep], self.observed[keep])


def series_key(feature_id: str, receptacle_id: str = "") -> str:
    """Identifier of one binary series: "object|receptacle", or the bare feature id."""
    return f"{feature_id}|{receptacle_id}" if receptacle_id else feature_id


def group_features(rows: Sequence[DatasetRow]) -> dict[str, FeatureData]:
    """Split dataset rows into one series per (feature, receptacle)."""
    buckets: dict[str, list[DatasetRow]] = {}
    for r in rows:
        buckets.setdefault(series_key(r.feature_id, r.receptacle_id), []).append(r)
    out = {}
    for key, rs in buckets.items():
        rs.sort(key=lambda r: r.time_s)
        times = np.array([r.time_s for r in rs])
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"series {key!r} has repeated or unordered timestamps")
        out[key] = FeatureData(
            rs[0].feature_id, rs[0].receptacle_id,
            times, np.array([r.gt for r in rs], dtype=int),
            np.array([r.observed for r in rs], dtype=int),
        )
    return out


def load_schedules(path) -> list[WeeklySchedule]:
    with open(path) as fh:
        data = json.load(fh)
    items = data["features"] if isinstance(data, dict) else data
    return [WeeklySchedule.from_dict(d) for d in items]
