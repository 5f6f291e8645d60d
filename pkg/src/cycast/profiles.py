"""Quadrant radial profiles and structural trajectories.

A stamp is reduced to 4 x 80 mean brightness temperatures: per geographic
quadrant, the mean over pixels whose center falls in each 5-km radial bin
from 0 to 400 km.  Stacking the present profile set with the 12 preceding
2-hourly sets gives a structural trajectory, rendered as a raster with time
increasing downward and radius rightward.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import matplotlib
import numpy as np

from .ingest import BrightnessStamp

# Quadrant channel order, fixed across the codebase.  Azimuth is measured
# counterclockwise from east (atan2 of north over east), so the half-open
# sectors are NE=[0,90), NW=[90,180), SW=[180,270), SE=[270,360).
QUADRANT_ORDER = ("NE", "NW", "SW", "SE")
N_QUADRANTS = 4
N_BINS = 80
BIN_KM = 5.0
MAX_RADIUS_KM = N_BINS * BIN_KM

# Trajectory geometry: 13 observed rows at 2-h spacing span 24 h; up to 6
# simulated rows extend the canvas to 19.
ROW_STEP = timedelta(hours=2)
N_OBSERVED_ROWS = 13
MAX_SIMULATED_ROWS = 6

# Fixed rendering color scale in degC.
RENDER_VMIN = -90.0
RENDER_VMAX = 30.0
RENDER_CMAP = "turbo_r"


@dataclass
class RadialProfileSet:
    """Mean brightness temperature per (quadrant, radial bin) at one time.

    ``values`` is 4 x 80 in QUADRANT_ORDER; bin k covers [5k, 5(k+1)) km.
    ``valid_counts`` holds contributing-pixel counts; gap-filled bins carry 0.
    """

    values: np.ndarray
    valid_counts: np.ndarray
    time: datetime

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.valid_counts = np.asarray(self.valid_counts, dtype=int)
        if self.values.shape != (N_QUADRANTS, N_BINS):
            raise ValueError(f"profile values must be {N_QUADRANTS}x{N_BINS}")
        if self.valid_counts.shape != self.values.shape:
            raise ValueError("valid_counts shape must match values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("profile values must be finite after gap-filling")


@dataclass
class StructuralTrajectory:
    """Time stack of radial profile sets, oldest row first.

    ``rows`` has shape (H, 80, 4); row h of a pure history sits at
    anchor_time - 24h + 2h*h.  Simulated rows, when present, extend the
    bottom of the stack.
    """

    rows: np.ndarray
    n_observed: int
    n_simulated: int
    anchor_time: datetime

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 3 or self.rows.shape[1:] != (N_BINS, N_QUADRANTS):
            raise ValueError(f"trajectory rows must be Hx{N_BINS}x{N_QUADRANTS}")
        if self.n_observed + self.n_simulated != self.rows.shape[0]:
            raise ValueError("row count must equal n_observed + n_simulated")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def row_time(self, h: int) -> datetime:
        return self.anchor_time + ROW_STEP * (h - (self.n_observed - 1))


def pixel_polar_coords(stamp: BrightnessStamp):
    """Per-pixel (radius km, azimuth deg in [0, 360)) relative to the center.

    Azimuth uses atan2(north_km, east_km); the exact-center pixel has
    undefined azimuth and is reported with radius 0.
    """
    rows, cols = stamp.grid.shape
    cr, cc = stamp.center_index
    north_km = (cr - np.arange(rows))[:, None] * stamp.pixel_km
    east_km = (np.arange(cols) - cc)[None, :] * stamp.pixel_km
    radius = np.hypot(north_km, east_km)
    azimuth = np.degrees(np.arctan2(north_km, east_km)) % 360.0
    return radius, azimuth


def compute_radial_profiles(stamp: BrightnessStamp) -> RadialProfileSet:
    """Bin a stamp into quadrant radial profiles.

    Membership is by pixel-center distance and azimuth (no area weighting).
    Empty (quadrant, bin) cells are filled by linear interpolation along
    radius within the quadrant, with nearest-value extrapolation at the ends,
    and flagged by valid_counts == 0.
    """
    rows, cols = stamp.grid.shape
    cr, cc = stamp.center_index
    margins_km = np.array([cr, rows - 1 - cr, cc, cols - 1 - cc]) * stamp.pixel_km
    if margins_km.min() < MAX_RADIUS_KM:
        raise ValueError(
            f"stamp covers only {margins_km.min():.0f} km from center; need {MAX_RADIUS_KM:.0f}"
        )

    radius, azimuth = pixel_polar_coords(stamp)
    in_range = (radius < MAX_RADIUS_KM) & np.isfinite(stamp.grid)
    in_range[cr, cc] = False  # center pixel: undefined azimuth
    quadrant = (azimuth // 90.0).astype(int) % N_QUADRANTS
    bin_index = (radius // BIN_KM).astype(int)

    flat_idx = (quadrant * N_BINS + bin_index)[in_range]
    temps = stamp.grid[in_range].astype(float)
    sums = np.bincount(flat_idx, weights=temps, minlength=N_QUADRANTS * N_BINS)
    counts = np.bincount(flat_idx, minlength=N_QUADRANTS * N_BINS)
    sums = sums.reshape(N_QUADRANTS, N_BINS)
    counts = counts.reshape(N_QUADRANTS, N_BINS).astype(int)

    values = np.full((N_QUADRANTS, N_BINS), np.nan)
    np.divide(sums, counts, out=values, where=counts > 0)
    for q, name in enumerate(QUADRANT_ORDER):
        have = np.flatnonzero(counts[q] > 0)
        if have.size == 0:
            raise ValueError(f"quadrant {name} has no valid pixels")
        missing = np.flatnonzero(counts[q] == 0)
        if missing.size:
            values[q, missing] = np.interp(missing, have, values[q, have])
    return RadialProfileSet(values=values, valid_counts=counts, time=stamp.time)


def assemble_trajectory(profiles: dict[datetime, RadialProfileSet], t: datetime) -> StructuralTrajectory:
    """Stack the 13 profile sets at t-24h .. t into an observed trajectory."""
    wanted = [t - ROW_STEP * (N_OBSERVED_ROWS - 1 - h) for h in range(N_OBSERVED_ROWS)]
    missing = [w for w in wanted if w not in profiles]
    if missing:
        stamps = ", ".join(m.isoformat() for m in missing)
        raise ValueError(f"missing profile sets at: {stamps}")
    rows = np.stack([profiles[w].values.T for w in wanted])  # (13, 80, 4)
    return StructuralTrajectory(rows=rows, n_observed=N_OBSERVED_ROWS, n_simulated=0, anchor_time=t)


def azimuthal_mean(traj: StructuralTrajectory) -> np.ndarray:
    """Unweighted mean over the 4 quadrant channels, shape (H, 80)."""
    return traj.rows.mean(axis=2)


def trajectory_to_rgb(values: np.ndarray) -> np.ndarray:
    """Map a (H, 80) or (H, 80, 4) temperature array through the fixed
    render color scale; quadrant stacks are averaged first.  Returns uint8
    RGB at one pixel per cell."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    norm = np.clip((arr - RENDER_VMIN) / (RENDER_VMAX - RENDER_VMIN), 0.0, 1.0)
    cmap = matplotlib.colormaps[RENDER_CMAP]
    rgba = cmap(norm, bytes=True)
    return rgba[..., :3]


def render_hovmoller(traj: StructuralTrajectory, path: str | os.PathLike, scale: int = 8,
                     rule_px: int = 2) -> None:
    """Write a trajectory raster: time downward, radius rightward.

    Each cell maps through the fixed [-90, 30] degC color scale and is
    upscaled by ``scale``.  When simulated rows are present a black
    horizontal rule of ``rule_px`` rows separates them from the observed
    block, so the output height is H*scale + rule_px.
    """
    from matplotlib import image as mpimage

    rgb = trajectory_to_rgb(traj.rows)
    big = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    if traj.n_simulated > 0:
        cut = traj.n_observed * scale
        rule = np.zeros((rule_px, big.shape[1], 3), dtype=np.uint8)
        big = np.concatenate([big[:cut], rule, big[cut:]], axis=0)
    mpimage.imsave(os.fspath(path), big)


# ---------------------------------------------------------------------------
# Tabular archive: one row per (storm, time, quadrant, bin)

PROFILE_CSV_FIELDS = ("storm_id", "time", "quadrant", "bin_index", "value_degC", "valid_count")
_TIME_FMT = "%Y-%m-%dT%H:%M:%SZ"


def write_profiles_csv(path: str | os.PathLike, storm_id: str,
                       profile_sets: list[RadialProfileSet], append: bool = False) -> None:
    mode = "a" if append else "w"
    write_header = not (append and os.path.exists(path) and os.path.getsize(path) > 0)
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(PROFILE_CSV_FIELDS)
        for ps in profile_sets:
            stamp = ps.time.astimezone(timezone.utc).strftime(_TIME_FMT)
            for q, name in enumerate(QUADRANT_ORDER):
                for k in range(N_BINS):
                    writer.writerow(
                        [storm_id, stamp, name, k, repr(float(ps.values[q, k])), int(ps.valid_counts[q, k])]
                    )


def read_profiles_csv(path: str | os.PathLike) -> dict[str, dict[datetime, RadialProfileSet]]:
    """Read the tabular archive back into per-storm, per-time profile sets."""
    acc: dict[tuple[str, datetime], tuple[np.ndarray, np.ndarray]] = {}
    qindex = {name: q for q, name in enumerate(QUADRANT_ORDER)}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PROFILE_CSV_FIELDS:
            raise ValueError(f"unexpected profile archive columns: {reader.fieldnames}")
        for row in reader:
            when = datetime.strptime(row["time"], _TIME_FMT).replace(tzinfo=timezone.utc)
            key = (row["storm_id"], when)
            if key not in acc:
                acc[key] = (np.full((N_QUADRANTS, N_BINS), np.nan), np.zeros((N_QUADRANTS, N_BINS), int))
            values, counts = acc[key]
            q = qindex[row["quadrant"]]
            k = int(row["bin_index"])
            values[q, k] = float(row["value_degC"])
            counts[q, k] = int(row["valid_count"])
    out: dict[str, dict[datetime, RadialProfileSet]] = {}
    for (storm_id, when), (values, counts) in sorted(acc.items()):
        out.setdefault(storm_id, {})[when] = RadialProfileSet(values=values, valid_counts=counts, time=when)
    return out
