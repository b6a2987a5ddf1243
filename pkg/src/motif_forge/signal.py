"""Signal loading, gap handling, day segmentation, windowing and SAX."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import norm

VALUE_MIN = 40.0
VALUE_MAX = 400.0
SAMPLE_PERIOD = 300  # seconds
MAX_GAP = timedelta(minutes=30)


class LoadError(ValueError):
    """Raised when an input file cannot be turned into signals."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Signal:
    """A uniformly sampled session with explicit presence bookkeeping.

    ``present`` marks samples that currently carry a value (observed or
    interpolated); ``observed`` marks samples present in the raw input. Values
    at absent positions are NaN but the masks are authoritative.
    """

    patient_id: str
    session_id: str
    start_time: datetime
    values: np.ndarray
    present: np.ndarray
    observed: np.ndarray
    sample_period: int = SAMPLE_PERIOD

    def __post_init__(self):
        values = _frozen(self.values)
        present = _frozen(self.present, bool)
        observed = _frozen(self.observed, bool)
        if not (values.shape == present.shape == observed.shape) or values.ndim != 1:
            raise ValueError("values and masks must be 1-D arrays of equal length")
        if np.any(observed & ~present):
            raise ValueError("observed samples must be present")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "present", present)
        object.__setattr__(self, "observed", observed)

    @property
    def length(self) -> int:
        return len(self.values)

    def timestamp(self, i: int) -> datetime:
        return self.start_time + timedelta(seconds=self.sample_period * i)

    @classmethod
    def from_values(cls, values, patient_id="p0", session_id="s0",
                    start_time=datetime(2000, 1, 1), sample_period=SAMPLE_PERIOD):
        """Build a signal from a list where ``None``/NaN marks a gap."""
        arr = np.array([np.nan if v is None else v for v in values], dtype=float)
        mask = ~np.isnan(arr)
        return cls(patient_id, session_id, start_time, arr, mask, mask.copy(), sample_period)


@dataclass(frozen=True)
class DaySegment:
    patient_id: str
    day_index: int
    values: np.ndarray
    day: Optional[date] = None
    session_id: str = ""

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("a day segment must be a fully observed 1-D sequence")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    @property
    def key(self) -> str:
        return f"{self.patient_id}/{self.day.isoformat() if self.day else self.day_index}"


@dataclass(frozen=True)
class Subsequence:
    source: object
    offset: int
    length: int
    values: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SymbolSequence:
    symbols: np.ndarray
    alphabet_size: int
    paa_width: int

    def word(self) -> str:
        return "".join(chr(ord("a") + int(s)) for s in self.symbols)


@dataclass(frozen=True)
class SaxConfig:
    alphabet_size: int = 5
    paa_width: int = 3


@dataclass(frozen=True)
class DayReport:
    patient_id: str
    day: date
    longest_gap_minutes: float
    kept: bool


def _parse_time(text, row):
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise LoadError(f"bad timestamp {text!r}", row) from exc


def _check_range(value, row, value_min, value_max):
    if not np.isfinite(value) or value < value_min or value > value_max:
        raise LoadError(f"value {value} outside sensor range [{value_min}, {value_max}]", row)


def _assemble(patient, session, stamps, vals, rows, period):
    start = stamps[0]
    step = timedelta(seconds=period)
    n = int(round((stamps[-1] - start) / step)) + 1
    values = np.full(n, np.nan)
    for t, v, row in zip(stamps, vals, rows):
        offset = (t - start) / step
        idx = int(round(offset))
        if abs(offset - idx) > 1e-9:
            raise LoadError(f"timestamp {t.isoformat()} is off the {period}s sampling grid", row)
        if v is not None:
            values[idx] = v
    mask = ~np.isnan(values)
    return Signal(patient, session, start, values, mask, mask.copy(), period)


def load_signals(path, value_min=VALUE_MIN, value_max=VALUE_MAX,
                 sample_period=SAMPLE_PERIOD) -> list[Signal]:
    """Read signals from a CSV (``patient_id,session_id,timestamp,value``) or
    JSON file. Timestamps absent from the grid become marked gaps.

    Row numbers in errors are 1-based file lines for CSV and 1-based session
    positions for JSON.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not text.strip():
        return []
    if path.suffix.lower() == ".json":
        return _load_json(text, value_min, value_max, sample_period)
    return _load_csv(text, value_min, value_max, sample_period)


def _load_csv(text, value_min, value_max, sample_period):
    reader = csv.reader(text.splitlines())
    header = [h.strip() for h in next(reader)]
    expected = ["patient_id", "session_id", "timestamp", "value"]
    if header != expected:
        raise LoadError(f"expected header {','.join(expected)}, got {','.join(header)}", 1)
    sessions: dict[tuple[str, str], tuple[list, list, list]] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != 4:
            raise LoadError(f"expected 4 fields, got {len(rec)}", lineno)
        patient, session, stamp, raw = (f.strip() for f in rec)
        t = _parse_time(stamp, lineno)
        value = None
        if raw:
            try:
                value = float(raw)
            except ValueError as exc:
                raise LoadError(f"bad value {raw!r}", lineno) from exc
            _check_range(value, lineno, value_min, value_max)
        stamps, vals, rows = sessions.setdefault((patient, session), ([], [], []))
        if stamps and t <= stamps[-1]:
            raise LoadError("timestamps must be strictly increasing within a session", lineno)
        stamps.append(t)
        vals.append(value)
        rows.append(lineno)
    return [_assemble(p, s, *recs, sample_period) for (p, s), recs in sessions.items()]


def _load_json(text, value_min, value_max, sample_period):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed JSON: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("sessions", [doc])
    out = []
    for i, obj in enumerate(doc, start=1):
        try:
            start = _parse_time(obj["start_time"], i)
            period = int(obj.get("sample_period", sample_period))
            raw = list(obj["values"])
            patient, session = str(obj["patient_id"]), str(obj["session_id"])
        except (KeyError, TypeError) as exc:
            raise LoadError(f"malformed session object: {exc}", i) from exc
        for v in raw:
            if v is not None:
                _check_range(float(v), i, value_min, value_max)
        out.append(Signal.from_values(raw, patient, session, start, period))
    return out


def save_signals_csv(signals: Iterable[Signal], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "session_id", "timestamp", "value"])
        for s in signals:
            for i, (v, ok) in enumerate(zip(s.values, s.present)):
                w.writerow([s.patient_id, s.session_id, s.timestamp(i).isoformat(),
                            repr(float(v)) if ok else ""])


def _runs(mask):
    """Start/stop index pairs of the True runs in a boolean array."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def interpolate_gaps(signal: Signal) -> Signal:
    """Linearly fill interior gaps; leading and trailing gaps stay marked."""
    idx = np.flatnonzero(signal.present)
    if len(idx) < 2:
        return signal
    values = signal.values.copy()
    present = signal.present.copy()
    interior = np.arange(idx[0], idx[-1] + 1)
    fill = interior[~signal.present[interior]]
    if len(fill) == 0:
        return signal
    values[fill] = np.interp(fill, idx, signal.values[idx])
    present[fill] = True
    return Signal(signal.patient_id, signal.session_id, signal.start_time,
                  values, present, signal.observed, signal.sample_period)


def samples_per_day(sample_period: int = SAMPLE_PERIOD) -> int:
    if 86400 % sample_period:
        raise ValueError("sample_period must divide one day")
    return 86400 // sample_period


def segment_days(signal: Signal, max_gap: timedelta = MAX_GAP):
    """Split a signal into calendar days.

    A day is kept when its longest run of originally missing samples, measured
    as run length times the sample period and truncated at midnight, is at most
    ``max_gap``. Positions of the day not covered by the session count as
    missing. Kept days must be fully present after interpolation.

    Returns ``(segments, reports)``.
    """
    signal = interpolate_gaps(signal)
    period = signal.sample_period
    per_day = samples_per_day(period)
    step = timedelta(seconds=period)
    first = signal.start_time
    last = signal.timestamp(signal.length - 1)
    midnight0 = datetime.combine(first.date(), datetime.min.time(), tzinfo=first.tzinfo)
    # offset of the session's sampling phase within a day
    phase = (first - midnight0) % step
    segments, reports = [], []
    day = first.date()
    day_index = 0
    while day <= last.date():
        day_start = datetime.combine(day, datetime.min.time(), tzinfo=first.tzinfo) + phase
        base = int(round((day_start - first) / step))
        pos = base + np.arange(per_day)
        inside = (pos >= 0) & (pos < signal.length)
        observed = np.zeros(per_day, dtype=bool)
        present = np.zeros(per_day, dtype=bool)
        values = np.full(per_day, np.nan)
        observed[inside] = signal.observed[pos[inside]]
        present[inside] = signal.present[pos[inside]]
        values[inside] = signal.values[pos[inside]]
        starts, stops = _runs(~observed)
        longest = int((stops - starts).max()) if len(starts) else 0
        gap_minutes = longest * period / 60.0
        kept = longest * period <= max_gap.total_seconds() and bool(present.all())
        reports.append(DayReport(signal.patient_id, day, gap_minutes, kept))
        if kept:
            segments.append(DaySegment(signal.patient_id, day_index, values, day,
                                       signal.session_id))
        day += timedelta(days=1)
        day_index += 1
    return segments, reports


def write_exclusion_report(reports: Iterable[DayReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "day", "longest_gap_minutes", "kept"])
        for r in reports:
            w.writerow([r.patient_id, r.day.isoformat(), f"{r.longest_gap_minutes:g}",
                        str(r.kept).lower()])


def _values(segment):
    return segment.values if hasattr(segment, "values") else np.asarray(segment, dtype=float)


def window_matrix(values, length: int, stride: int = 1) -> np.ndarray:
    """Read-only (n_windows, length) view of the windows of a 1-D array."""
    values = np.asarray(values, dtype=float)
    if length < 1 or stride < 1:
        raise ValueError("length and stride must be positive")
    if length > len(values):
        raise ValueError(f"window length {length} exceeds sequence length {len(values)}")
    return np.lib.stride_tricks.sliding_window_view(values, length)[::stride]


def windows(segment, length: int, stride: int) -> list[Subsequence]:
    mat = window_matrix(_values(segment), length, stride)
    return [Subsequence(segment, i * stride, length, row) for i, row in enumerate(mat)]


def tile(values, length: int) -> np.ndarray:
    """Non-overlapping windows; a trailing partial window is dropped."""
    values = np.asarray(values, dtype=float)
    n = len(values) // length
    return values[: n * length].reshape(n, length)


def sax_breakpoints(alphabet_size: int) -> np.ndarray:
    return norm.ppf(np.arange(1, alphabet_size) / alphabet_size)


def znormalize(x, min_std: float = 0.0):
    """Z-normalize along the last axis; rows with std <= min_std become zeros."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    flat = sd <= max(min_std, 1e-12 * max(1.0, float(np.abs(mu).max(initial=0.0))))
    out = np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))
    return out, flat[..., 0]


def _check_sax(alphabet_size, paa_width):
    if not 2 <= alphabet_size <= 20:
        raise ValueError(f"alphabet_size must lie in [2, 20], got {alphabet_size}")
    if paa_width < 1:
        raise ValueError(f"paa_width must be >= 1, got {paa_width}")


def sax_words(rows: np.ndarray, alphabet_size: int, paa_width: int) -> np.ndarray:
    """SAX symbols for each row of a 2-D array, each row normalized on its own."""
    _check_sax(alphabet_size, paa_width)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    z, flat = znormalize(rows)
    n_sym = rows.shape[1] // paa_width
    paa = z[:, : n_sym * paa_width].reshape(len(rows), n_sym, paa_width).mean(axis=2)
    symbols = np.searchsorted(sax_breakpoints(alphabet_size), paa, side="right")
    symbols[flat] = alphabet_size // 2
    return symbols.astype(np.int64)


def sax_discretize(segment, alphabet_size: int = 5, paa_width: int = 3) -> SymbolSequence:
    """Z-normalize a segment, average blocks of ``paa_width`` samples and map
    each block mean to its standard-normal quantile bin."""
    values = _values(segment)
    symbols = sax_words(values[None, :], alphabet_size, paa_width)[0]
    return SymbolSequence(symbols, alphabet_size, paa_width)


def standardize(segments: Sequence, stats=None):
    """Dataset-level z-scoring; returns new segments and ``(mean, std)``."""
    if stats is None:
        allv = np.concatenate([_values(s) for s in segments])
        stats = (float(allv.mean()), float(allv.std()))
    mu, sd = stats
    if sd <= 0:
        raise ValueError("cannot standardize constant data")
    out = []
    for s in segments:
        if isinstance(s, DaySegment):
            out.append(DaySegment(s.patient_id, s.day_index, (s.values - mu) / sd, s.day,
                                  s.session_id))
        else:
            out.append((np.asarray(s, dtype=float) - mu) / sd)
    return out, stats


def save_segments(segments: Iterable[DaySegment], path) -> None:
    """Long-format CSV: one row per sample of every day segment."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "session_id", "day", "day_index", "index", "value"])
        for s in segments:
            day = s.day.isoformat() if s.day else ""
            for i, v in enumerate(s.values):
                w.writerow([s.patient_id, s.session_id, day, s.day_index, i, repr(float(v))])


def load_segments(path) -> list[DaySegment]:
    groups: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["patient_id"], row["session_id"], row["day"], int(row["day_index"]))
            groups.setdefault(key, []).append(float(row["value"]))
    return [DaySegment(p, di, vals, date.fromisoformat(d) if d else None, sess)
            for (p, sess, d, di), vals in groups.items()]
