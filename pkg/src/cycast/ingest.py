"""Parsers for external storm data plus the on-disk stamp store.

Three text formats are read:

* HURDAT2 best-track files (NOAA layout): a header line per storm
  (``AL052019, DORIAN, 64,``) followed by that many data lines
  (``20190901, 1800, L, HU, 26.6N, 77.0W, 160, 927, ...``).
* ATCF A-deck files: comma-delimited aid lines; only CARQ rows at TAU=0 are
  kept, giving the operational analysis series.
* SHIPS developmental files: whitespace-aligned blocks keyed by a trailing
  variable name per row; the shear variable name, unit scale and missing
  sentinel are configuration because deployments differ.

Longitudes are stored signed east-positive everywhere (a W suffix negates).
Temperatures are Celsius internally; stamp files tagged "K" are converted on
load.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_SENTINELS = {"-999", "-99", ""}


class ParseError(ValueError):
    """Raised on malformed input lines; carries line number and field name."""

    def __init__(self, message: str, line_number: int | None = None, field_name: str | None = None):
        self.line_number = line_number
        self.field_name = field_name
        where = f" (line {line_number}" if line_number is not None else ""
        if field_name is not None:
            where += f", field {field_name!r}" if where else f" (field {field_name!r}"
        if where:
            where += ")"
        super().__init__(message + where)


class Status(Enum):
    TD = "TD"
    TS = "TS"
    HU = "HU"
    EX = "EX"
    OTHER = "other"


class Source(Enum):
    BEST_TRACK = "best_track"
    OPERATIONAL = "operational"
    INTERPOLATED = "interpolated"


@dataclass(frozen=True)
class TrackPoint:
    storm_id: str
    time: datetime
    lat: float
    lon: float
    vmax: float | None
    status: Status
    source: Source

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if self.vmax is not None and self.vmax < 0:
            raise ValueError(f"vmax {self.vmax} negative")


@dataclass(frozen=True)
class ShearRecord:
    storm_id: str
    time: datetime
    magnitude: float
    direction: float | None = None

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError(f"shear magnitude {self.magnitude} negative")
        if self.direction is not None and not 0.0 <= self.direction < 360.0:
            raise ValueError(f"shear direction {self.direction} outside [0, 360)")


@dataclass(frozen=True)
class StormHeader:
    storm_id: str
    name: str
    n_records: int


@dataclass
class BrightnessStamp:
    """TC-centered grid of cloud-top brightness temperatures in Celsius.

    Row-major with the first row northernmost; missing pixels are NaN.
    """

    storm_id: str
    time: datetime
    grid: np.ndarray
    pixel_km: float = 4.0
    center_index: tuple[int, int] | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 2:
            raise ValueError("stamp grid must be 2-D")
        if self.pixel_km <= 0:
            raise ValueError("pixel_km must be positive")
        if self.center_index is None:
            self.center_index = (self.grid.shape[0] // 2, self.grid.shape[1] // 2)
        finite = self.grid[np.isfinite(self.grid)]
        if finite.size and (finite.min() < -110.0 or finite.max() > 60.0):
            raise ValueError("finite stamp temperatures must lie in [-110, 60] degC")


# ---------------------------------------------------------------------------
# HURDAT2


def _parse_latlon(token: str, kind: str, line_number: int) -> float:
    token = token.strip()
    if not token:
        raise ParseError(f"empty {kind}", line_number, kind)
    suffix = token[-1].upper()
    signs = {"N": 1.0, "S": -1.0} if kind == "lat" else {"E": 1.0, "W": -1.0}
    if suffix not in signs:
        raise ParseError(f"bad hemisphere suffix {suffix!r} in {token!r}", line_number, kind)
    try:
        value = float(token[:-1])
    except ValueError:
        raise ParseError(f"non-numeric {kind} {token!r}", line_number, kind) from None
    return signs[suffix] * value


def _parse_optional_number(token: str) -> float | None:
    token = token.strip()
    if token in MISSING_SENTINELS:
        return None
    return float(token)


def _status_from_code(code: str) -> Status:
    code = code.strip().upper()
    try:
        return Status(code)
    except ValueError:
        return Status.OTHER


def parse_hurdat2(text: str) -> list[tuple[StormHeader, list[TrackPoint]]]:
    """Parse HURDAT2 best-track text into (header, points) pairs.

    A mismatch between the header record count and the number of data lines
    is logged as a warning and parsing continues; malformed fields raise
    :class:`ParseError` with the offending line number.
    """
    storms: list[tuple[StormHeader, list[TrackPoint]]] = []
    current: list[TrackPoint] | None = None
    header: StormHeader | None = None

    def close_storm():
        if header is not None:
            if len(current) != header.n_records:
                logger.warning(
                    "HURDAT2 storm %s: header declares %d records, found %d",
                    header.storm_id, header.n_records, len(current),
                )
            storms.append((header, current))

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        is_header = len(fields[0]) == 8 and fields[0][:2].isalpha() and not fields[0].isdigit()
        if is_header:
            close_storm()
            try:
                n_records = int(fields[2])
            except (IndexError, ValueError):
                raise ParseError("bad header record count", line_number, "record_count") from None
            header = StormHeader(storm_id=fields[0], name=fields[1], n_records=n_records)
            current = []
            continue
        if header is None:
            raise ParseError("data line before any storm header", line_number)
        if len(fields) < 7:
            raise ParseError(f"expected at least 7 fields, got {len(fields)}", line_number)
        try:
            when = datetime.strptime(fields[0] + fields[1], "%Y%m%d%H%M").replace(tzinfo=timezone.utc)
        except ValueError:
            raise ParseError(f"bad date/time {fields[0]!r} {fields[1]!r}", line_number, "time") from None
        lat = _parse_latlon(fields[4], "lat", line_number)
        lon = _parse_latlon(fields[5], "lon", line_number)
        try:
            vmax = _parse_optional_number(fields[6])
        except ValueError:
            raise ParseError(f"non-numeric vmax {fields[6]!r}", line_number, "vmax") from None
        current.append(
            TrackPoint(
                storm_id=header.storm_id,
                time=when,
                lat=lat,
                lon=lon,
                vmax=vmax,
                status=_status_from_code(fields[3]),
                source=Source.BEST_TRACK,
            )
        )
    close_storm()
    return storms


# ---------------------------------------------------------------------------
# ATCF A-deck (CARQ rows)


def parse_adeck_carq(text: str) -> list[TrackPoint]:
    """Extract the operational analysis series from an ATCF A-deck.

    Keeps rows with TECH == CARQ and TAU == 0.  A-deck latitudes and
    longitudes are in tenths of a degree with hemisphere suffix ("266N" is
    26.6 N).  Duplicate (storm, time) rows collapse to the last occurrence.
    """
    by_key: dict[tuple[str, datetime], TrackPoint] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 9:
            continue
        basin, cy, stamp, _technum, tech, tau_s = fields[:6]
        if tech != "CARQ":
            continue
        try:
            tau = int(tau_s)
        except ValueError:
            raise ParseError(f"non-integer TAU {tau_s!r}", line_number, "TAU") from None
        if tau != 0:
            continue
        try:
            when = datetime.strptime(stamp, "%Y%m%d%H").replace(tzinfo=timezone.utc)
        except ValueError:
            raise ParseError(f"bad timestamp {stamp!r}", line_number, "time") from None
        lat = _parse_latlon(fields[6], "lat", line_number) / 10.0
        lon = _parse_latlon(fields[7], "lon", line_number) / 10.0
        try:
            vmax = int(fields[8])
        except ValueError:
            raise ParseError(f"non-integer VMAX {fields[8]!r}", line_number, "VMAX") from None
        storm_id = f"{basin}{cy}{when.year}"
        status = _status_from_code(fields[10]) if len(fields) > 10 else Status.OTHER
        by_key[(storm_id, when)] = TrackPoint(
            storm_id=storm_id,
            time=when,
            lat=lat,
            lon=lon,
            vmax=float(vmax),
            status=status,
            source=Source.OPERATIONAL,
        )
    return [by_key[k] for k in sorted(by_key)]


# ---------------------------------------------------------------------------
# SHIPS developmental format


@dataclass(frozen=True)
class ShipsConfig:
    """Knobs for the SHIPS developmental parser.

    The file grammar keys rows by a trailing variable name; which variable
    holds shear magnitude, what scale converts it to knots, and the missing
    sentinel all vary by vintage, so they are configuration.  The default
    direction variable name (SHTD) is a guess and is not verified against
    any authority; override it if your files differ.
    """

    magnitude_var: str = "SHRD"
    magnitude_scale: float = 0.1
    direction_var: str | None = "SHTD"
    direction_scale: float = 1.0
    missing_sentinel: float = 9999.0


def parse_ships_shear(text: str, config: ShipsConfig | None = None) -> list[ShearRecord]:
    """Parse SHIPS developmental blocks into shear records at TIME=0.

    Each block opens with a HEAD row (``<storm_id> <name> <yymmdd> <hh> ...
    HEAD``), contains a TIME row of forecast-hour offsets and variable rows
    whose last token names the variable.  The TIME=0 column is selected by
    position in the TIME row.  Blocks missing the magnitude variable are
    skipped with a warning; sentinel-valued magnitudes drop the record.
    """
    cfg = config or ShipsConfig()
    records: list[ShearRecord] = []
    block_header: tuple[str, datetime] | None = None
    time_index: int | None = None
    block_values: dict[str, list[str]] = {}

    def flush(line_number: int):
        nonlocal block_header, time_index, block_values
        if block_header is None:
            return
        storm_id, when = block_header
        row = block_values.get(cfg.magnitude_var)
        if row is None:
            logger.warning("SHIPS block %s %s: no %s row", storm_id, when, cfg.magnitude_var)
        elif time_index is None:
            logger.warning("SHIPS block %s %s: no TIME row", storm_id, when)
        else:
            try:
                raw = float(row[time_index])
            except (IndexError, ValueError):
                raise ParseError(
                    f"unparseable {cfg.magnitude_var} value", line_number, cfg.magnitude_var
                ) from None
            if raw == cfg.missing_sentinel:
                logger.warning("SHIPS block %s %s: %s missing", storm_id, when, cfg.magnitude_var)
            else:
                direction = None
                if cfg.direction_var is not None and cfg.direction_var in block_values:
                    try:
                        draw = float(block_values[cfg.direction_var][time_index])
                    except (IndexError, ValueError):
                        draw = cfg.missing_sentinel
                    if draw != cfg.missing_sentinel:
                        direction = (draw * cfg.direction_scale) % 360.0
                records.append(
                    ShearRecord(
                        storm_id=storm_id,
                        time=when,
                        magnitude=raw * cfg.magnitude_scale,
                        direction=direction,
                    )
                )
        block_header = None
        time_index = None
        block_values = {}

    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        key = tokens[-1]
        if key == "HEAD":
            flush(line_number)
            if len(tokens) < 4:
                raise ParseError("HEAD row needs storm id, name, date, hour", line_number)
            try:
                when = datetime.strptime(tokens[2] + tokens[3], "%y%m%d%H").replace(tzinfo=timezone.utc)
            except ValueError:
                raise ParseError(f"bad HEAD date {tokens[2]!r} {tokens[3]!r}", line_number, "time") from None
            block_header = (tokens[0], when)
        elif key == "TIME":
            offsets = tokens[:-1]
            if "0" not in offsets:
                raise ParseError("TIME row lacks a 0 column", line_number, "TIME")
            time_index = offsets.index("0")
        else:
            block_values[key] = tokens[:-1]
    flush(-1)
    return records


# ---------------------------------------------------------------------------
# Track utilities


def interpolate_track(points: Sequence[TrackPoint], step: timedelta = timedelta(hours=2)) -> list[TrackPoint]:
    """Linearly interpolate lat, lon and vmax onto a regular time grid.

    The grid runs at ``step`` multiples from the first point; original points
    are preserved exactly (original source label included), so the output is
    the sorted union of grid times and input times.
    """
    if len(points) < 2:
        raise ValueError("cannot interpolate a track with fewer than 2 points")
    times = [p.time for p in points]
    if any(t1 >= t2 for t1, t2 in zip(times, times[1:])):
        raise ValueError("track times must be strictly increasing")
    if any(p.vmax is None for p in points):
        raise ValueError("cannot interpolate a track with missing vmax")

    by_time = {p.time: p for p in points}
    grid = []
    t = times[0]
    while t <= times[-1]:
        grid.append(t)
        t += step
    all_times = sorted(set(grid) | set(times))

    out: list[TrackPoint] = []
    seg = 0
    for t in all_times:
        if t in by_time:
            out.append(by_time[t])
            continue
        while times[seg + 1] < t:
            seg += 1
        a, b = points[seg], points[seg + 1]
        w = (t - a.time) / (b.time - a.time)
        out.append(
            TrackPoint(
                storm_id=a.storm_id,
                time=t,
                lat=a.lat + w * (b.lat - a.lat),
                lon=a.lon + w * (b.lon - a.lon),
                vmax=a.vmax + w * (b.vmax - a.vmax),
                status=a.status,
                source=Source.INTERPOLATED,
            )
        )
    return out


def lifetime_filter(points: Sequence[TrackPoint], threshold_kt: float = 35.0) -> list[TrackPoint]:
    """Trim a best-track series to its first..last points at or above the
    intensity threshold; interior dips below it are retained."""
    alive = [i for i, p in enumerate(points) if p.vmax is not None and p.vmax >= threshold_kt]
    if not alive:
        return []
    return list(points[alive[0] : alive[-1] + 1])


# ---------------------------------------------------------------------------
# Text-format writers (round-trip partners of the parsers above)


def format_hurdat2(storms: Iterable[tuple[StormHeader, Sequence[TrackPoint]]]) -> str:
    """Render (header, points) pairs in the HURDAT2 layout."""
    lines = []
    for header, points in storms:
        lines.append(f"{header.storm_id},{header.name.rjust(19)},{str(len(points)).rjust(7)},")
        for p in points:
            lat = f"{abs(p.lat):.1f}{'N' if p.lat >= 0 else 'S'}"
            lon = f"{abs(p.lon):.1f}{'E' if p.lon >= 0 else 'W'}"
            vmax = f"{int(round(p.vmax)):d}" if p.vmax is not None else "-999"
            status = p.status.value if p.status is not Status.OTHER else "LO"
            lines.append(
                f"{p.time:%Y%m%d}, {p.time:%H%M},  , {status}, {lat.rjust(5)}, "
                f"{lon.rjust(6)}, {vmax.rjust(3)}, -999,"
            )
    return "\n".join(lines) + "\n"


def format_adeck_carq(points: Sequence[TrackPoint]) -> str:
    """Render operational points as A-deck CARQ TAU=0 rows."""
    lines = []
    for p in points:
        basin, cy = p.storm_id[:2], p.storm_id[2:4]
        lat = f"{int(round(abs(p.lat) * 10))}{'N' if p.lat >= 0 else 'S'}"
        lon = f"{int(round(abs(p.lon) * 10))}{'E' if p.lon >= 0 else 'W'}"
        status = p.status.value if p.status is not Status.OTHER else "XX"
        lines.append(
            f"{basin}, {cy}, {p.time:%Y%m%d%H},   , CARQ,   0, {lat.rjust(5)}, "
            f"{lon.rjust(6)}, {int(round(p.vmax)):>4d}, 9999, {status},"
        )
    return "\n".join(lines) + "\n"


def format_ships(records: Sequence[ShearRecord], config: ShipsConfig | None = None) -> str:
    """Render shear records as minimal SHIPS developmental blocks."""
    cfg = config or ShipsConfig()
    lines = []
    for r in records:
        lines.append(f"{r.storm_id} SYNTH {r.time:%y%m%d} {r.time:%H} HEAD")
        lines.append("  -12    -6     0     6    12 TIME")
        mag = int(round(r.magnitude / cfg.magnitude_scale))
        sent = int(cfg.missing_sentinel)
        lines.append(f"{sent:>5d} {sent:>5d} {mag:>5d} {sent:>5d} {sent:>5d} {cfg.magnitude_var}")
        if r.direction is not None and cfg.direction_var:
            d = int(round(r.direction / cfg.direction_scale))
            lines.append(f"{sent:>5d} {sent:>5d} {d:>5d} {sent:>5d} {sent:>5d} {cfg.direction_var}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Stamp store: JSON sidecar header + raw float32 little-endian payload


STAMP_UNITS = ("degC", "K")
_TIME_FMT = "%Y-%m-%dT%H:%M:%SZ"


def store_stamp(stamp: BrightnessStamp, path: str | os.PathLike) -> None:
    """Write a stamp as raw little-endian float32 plus a JSON sidecar."""
    path = os.fspath(path)
    rows, cols = stamp.grid.shape
    header = {
        "storm_id": stamp.storm_id,
        "time": stamp.time.astimezone(timezone.utc).strftime(_TIME_FMT),
        "pixel_km": stamp.pixel_km,
        "rows": rows,
        "cols": cols,
        "center_index": list(stamp.center_index),
        "units": "degC",
    }
    payload = np.ascontiguousarray(stamp.grid, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(payload.tobytes())
    with open(path + ".hdr", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1)
        fh.write("\n")


def load_stamp(path: str | os.PathLike) -> BrightnessStamp:
    """Read a stamp written by :func:`store_stamp`.

    NaN cells round-trip bitwise.  A payload whose length disagrees with the
    header dimensions is an error, as is an unknown units tag; Kelvin
    payloads are converted to Celsius.
    """
    path = os.fspath(path)
    with open(path + ".hdr", "r", encoding="utf-8") as fh:
        header = json.load(fh)
    units = header.get("units")
    if units not in STAMP_UNITS:
        raise ValueError(f"unknown stamp units tag {units!r}")
    rows, cols = int(header["rows"]), int(header["cols"])
    with open(path, "rb") as fh:
        payload = fh.read()
    expected = rows * cols * 4
    if len(payload) != expected:
        raise ValueError(
            f"stamp payload is {len(payload)} bytes, header implies {expected}"
        )
    grid = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    if units == "K":
        grid = grid - 273.15
    return BrightnessStamp(
        storm_id=header["storm_id"],
        time=datetime.strptime(header["time"], _TIME_FMT).replace(tzinfo=timezone.utc),
        grid=grid,
        pixel_km=float(header["pixel_km"]),
        center_index=tuple(header["center_index"]),
    )
