"""Time-series and attribute containers, CSV ingestion, alignment and
forcing standardization.

File contracts (all UTF-8, comma separated, one header row):

* forcing:    ``date,precip_mm_day,temp_c,pet_mm_day``
* discharge:  ``date,discharge``
* manifest:   ``basin_id,x,y,region,forcing_path,discharge_path``
* attributes: ``basin_id,<attr1>,...,<attrN>``

Dates are ISO-8601 Gregorian days, one row per day with no gaps. Values are
written as decimal text with 10 significant digits; a series whose values are
representable at that precision round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    EmptyFileError,
    LengthMismatchError,
    MissingDateError,
    NegativePrecipError,
    NoOverlapError,
    NonNumericError,
    SchemaMismatchError,
    ZeroVarianceError,
)

log = logging.getLogger(__name__)

FORCING_HEADER = ("date", "precip_mm_day", "temp_c", "pet_mm_day")
DISCHARGE_HEADER = ("date", "discharge")
MANIFEST_HEADER = ("basin_id", "x", "y", "region", "forcing_path", "discharge_path")
VALUE_FORMAT = ".10g"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


@dataclass(frozen=True)
class DateIndex:
    """A run of ``length`` consecutive days starting at ``start``."""

    start: dt.date
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise DataError(f"DateIndex length must be >= 1, got {self.length}")

    @classmethod
    def between(cls, first: dt.date, last: dt.date) -> "DateIndex":
        """Inclusive range ``first..last``."""
        return cls(first, (last - first).days + 1)

    @property
    def end(self) -> dt.date:
        """Last day (inclusive)."""
        return self.start + dt.timedelta(days=self.length - 1)

    @property
    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=i) for i in range(self.length)]

    def offset_of(self, day: dt.date) -> int:
        return (day - self.start).days

    def slice_for(self, window: "DateIndex") -> slice:
        """Positional slice of ``window`` inside this index."""
        lo = self.offset_of(window.start)
        if lo < 0 or lo + window.length > self.length:
            raise NoOverlapError(
                f"window {window.start}..{window.end} not inside {self.start}..{self.end}"
            )
        return slice(lo, lo + window.length)

    def contains(self, window: "DateIndex") -> bool:
        return window.start >= self.start and window.end <= self.end


def align(a: DateIndex, b: DateIndex) -> DateIndex:
    """Maximal common window of two indices."""
    start = max(a.start, b.start)
    end = min(a.end, b.end)
    if end < start:
        raise NoOverlapError(f"{a.start}..{a.end} and {b.start}..{b.end} do not overlap")
    return DateIndex.between(start, end)


@dataclass(frozen=True)
class ForcingSeries:
    index: DateIndex
    precip: np.ndarray
    temp: np.ndarray
    pet: np.ndarray

    def __post_init__(self):
        for name in ("precip", "temp", "pet"):
            arr = _frozen(getattr(self, name))
            if arr.ndim != 1 or arr.size != self.index.length:
                raise LengthMismatchError(
                    f"forcing channel {name} has {arr.size} values, index has {self.index.length}"
                )
            if not np.all(np.isfinite(arr)):
                raise NonNumericError(f"forcing channel {name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if np.any(self.precip < 0):
            raise NegativePrecipError("negative precipitation")
        if np.any(self.pet < 0):
            raise DataError("negative potential evapotranspiration")

    def as_matrix(self) -> np.ndarray:
        """T x 3 array in channel order precip, temp, pet."""
        return np.column_stack([self.precip, self.temp, self.pet])

    def window(self, w: DateIndex) -> "ForcingSeries":
        sl = self.index.slice_for(w)
        return ForcingSeries(w, self.precip[sl], self.temp[sl], self.pet[sl])


@dataclass(frozen=True)
class DischargeSeries:
    index: DateIndex
    q: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.q)
        if arr.ndim != 1 or arr.size != self.index.length:
            raise LengthMismatchError(
                f"discharge has {arr.size} values, index has {self.index.length}"
            )
        if not np.all(np.isfinite(arr)):
            raise NonNumericError("discharge contains non-finite values")
        if np.any(arr < 0):
            raise DataError("negative discharge")
        object.__setattr__(self, "q", arr)

    def window(self, w: DateIndex) -> "DischargeSeries":
        return DischargeSeries(w, self.q[self.index.slice_for(w)])


@dataclass(frozen=True)
class BasinRecord:
    basin_id: str
    centroid: tuple[float, float]
    forcing: ForcingSeries
    region: str | None = None
    discharge: DischargeSeries | None = None

    def __post_init__(self):
        if self.discharge is not None:
            align(self.forcing.index, self.discharge.index)

    @property
    def gauged(self) -> bool:
        return self.discharge is not None


@dataclass(frozen=True)
class AttributeTable:
    basin_ids: tuple[str, ...]
    attribute_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "basin_ids", tuple(self.basin_ids))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        vals = _frozen(self.values)
        if vals.shape != (len(self.basin_ids), len(self.attribute_names)):
            raise SchemaMismatchError(
                f"attribute matrix shape {vals.shape} does not match "
                f"{len(self.basin_ids)} basins x {len(self.attribute_names)} attributes"
            )
        if not np.all(np.isfinite(vals)):
            raise NonNumericError("attribute table has missing or non-finite entries")
        if len(set(self.basin_ids)) != len(self.basin_ids):
            raise DataError("duplicate basin_id in attribute table")
        object.__setattr__(self, "values", vals)

    def rows(self, basin_ids: Sequence[str]) -> np.ndarray:
        pos = {b: i for i, b in enumerate(self.basin_ids)}
        missing = [b for b in basin_ids if b not in pos]
        if missing:
            raise SchemaMismatchError(f"no attributes for basins {missing}")
        return self.values[[pos[b] for b in basin_ids]]

    def varying_columns(self, basin_ids: Sequence[str]) -> list[int]:
        """Columns with nonzero variance over ``basin_ids``; warns about the rest."""
        sub = self.rows(basin_ids)
        keep = []
        for j, name in enumerate(self.attribute_names):
            if np.ptp(sub[:, j]) > 0:
                keep.append(j)
            else:
                log.warning("dropping constant attribute %r", name)
        return keep


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if np.any(self.std <= 0):
            raise ZeroVarianceError("channel std must be > 0")

    def apply(self, f: ForcingSeries) -> np.ndarray:
        return (f.as_matrix() - self.mean) / self.std


CHANNELS = ("precip", "temp", "pet")


def standardize_forcing(f: ForcingSeries) -> tuple[np.ndarray, ChannelStats]:
    """Z-score each channel with population statistics over the whole series."""
    x = f.as_matrix()
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    for name, s in zip(CHANNELS, std):
        if not s > 0:
            raise ZeroVarianceError(f"forcing channel {name} is constant")
    stats = ChannelStats(mean, std)
    return (x - mean) / std, stats


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path: Path, expected_header: Sequence[str] | None = None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyFileError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if expected_header is not None and tuple(header) != tuple(expected_header):
        raise SchemaMismatchError(
            f"{path}: header {','.join(header)!r} != {','.join(expected_header)!r}"
        )
    if len(rows) < 2:
        raise EmptyFileError(f"{path}: header only, no data rows")
    return header, rows[1:]


def _number(text: str, path, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonNumericError(f"{path}: row {row}, column {column}: {text!r} is not a number") from None
    if not math.isfinite(value):
        raise NonNumericError(f"{path}: row {row}, column {column}: non-finite value {text!r}")
    return value


def read_dated_table(path, expected_header: Sequence[str] | None = None):
    """Parse a ``date,...`` CSV into (DateIndex, column names, T x k array).

    Rows may arrive in any order; they are sorted by date and must then form
    a gap-free daily sequence. Row numbers in messages count data rows from 1.
    """
    header, rows = _read_rows(path, expected_header)
    if header[0] != "date":
        raise SchemaMismatchError(f"{path}: first column must be 'date'")
    names = header[1:]
    parsed = []
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise SchemaMismatchError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
        try:
            day = parse_date(r[0])
        except ValueError:
            raise NonNumericError(f"{path}: row {i}: bad date {r[0]!r}") from None
        vals = [_number(c, path, i, n) for c, n in zip(r[1:], names)]
        parsed.append((day, i, vals))
    parsed.sort(key=lambda p: p[0])
    for (prev, _, _), (day, i, _) in zip(parsed, parsed[1:]):
        step = (day - prev).days
        if step == 0:
            raise DataError(f"{path}: row {i}: duplicate date {day}")
        if step > 1:
            raise MissingDateError(f"{path}: row {i}: gap after {prev} (next date {day})")
    index = DateIndex(parsed[0][0], len(parsed))
    values = np.array([p[2] for p in parsed], dtype=float).reshape(len(parsed), len(names))
    return index, names, values, [p[1] for p in parsed]


def load_forcing(path) -> ForcingSeries:
    index, _, v, rownums = read_dated_table(path, FORCING_HEADER)
    bad = np.flatnonzero(v[:, 0] < 0)
    if bad.size:
        raise NegativePrecipError(f"{path}: row {rownums[bad[0]]}: negative precipitation {v[bad[0], 0]}")
    bad = np.flatnonzero(v[:, 2] < 0)
    if bad.size:
        raise DataError(f"{path}: row {rownums[bad[0]]}: negative PET {v[bad[0], 2]}")
    return ForcingSeries(index, v[:, 0], v[:, 1], v[:, 2])


def load_discharge(path) -> DischargeSeries:
    index, _, v, rownums = read_dated_table(path, DISCHARGE_HEADER)
    bad = np.flatnonzero(v[:, 0] < 0)
    if bad.size:
        raise DataError(f"{path}: row {rownums[bad[0]]}: negative discharge {v[bad[0], 0]}")
    return DischargeSeries(index, v[:, 0])


def fmt(x: float) -> str:
    return format(float(x), VALUE_FORMAT)


def write_dated_table(path, index: DateIndex, names: Sequence[str], columns: Iterable[np.ndarray]):
    cols = [np.asarray(c, dtype=float) for c in columns]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        for i, day in enumerate(index.dates):
            w.writerow([day.isoformat(), *(fmt(c[i]) for c in cols)])


def write_forcing(path, f: ForcingSeries):
    write_dated_table(path, f.index, FORCING_HEADER[1:], [f.precip, f.temp, f.pet])


def write_discharge(path, d: DischargeSeries):
    write_dated_table(path, d.index, DISCHARGE_HEADER[1:], [d.q])


def load_manifest(path) -> list[BasinRecord]:
    """Read a basin manifest; forcing/discharge paths resolve relative to it."""
    path = Path(path)
    _, rows = _read_rows(path, MANIFEST_HEADER)
    basins = []
    seen = set()
    for i, r in enumerate(rows, start=1):
        if len(r) != len(MANIFEST_HEADER):
            raise SchemaMismatchError(f"{path}: row {i} has {len(r)} fields")
        bid, x, y, region, fpath, qpath = (c.strip() for c in r)
        if not bid:
            raise DataError(f"{path}: row {i}: empty basin_id")
        if bid in seen:
            raise DataError(f"{path}: row {i}: duplicate basin_id {bid!r}")
        seen.add(bid)
        centroid = (_number(x, path, i, "x"), _number(y, path, i, "y"))
        forcing = load_forcing(path.parent / fpath)
        discharge = load_discharge(path.parent / qpath) if qpath else None
        basins.append(BasinRecord(bid, centroid, forcing, region or None, discharge))
    return basins


def write_manifest(path, rows: Iterable[tuple]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for bid, x, y, region, fpath, qpath in rows:
            w.writerow([bid, repr(float(x)), repr(float(y)), region or "", fpath, qpath or ""])


def load_attributes(path) -> AttributeTable:
    header, rows = _read_rows(path)
    if header[0] != "basin_id" or len(header) < 2:
        raise SchemaMismatchError(f"{path}: header must be basin_id,<attr1>,...")
    names = header[1:]
    ids, vals = [], []
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise SchemaMismatchError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
        ids.append(r[0].strip())
        vals.append([_number(c, path, i, n) for c, n in zip(r[1:], names)])
    return AttributeTable(tuple(ids), tuple(names), np.array(vals, dtype=float))


def write_attributes(path, table: AttributeTable):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["basin_id", *table.attribute_names])
        for bid, row in zip(table.basin_ids, table.values):
            w.writerow([bid, *(repr(float(v)) for v in row)])
