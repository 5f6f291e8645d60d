"""Synthetic storms with analytically known structure-intensity coupling.

The generator exists so the full pipeline can be trained and verified at desk
scale against closed-form oracles.  It is NOT a physical TC model; every
functional form below is chosen to be simple and invertible.

Stamp field, deterministic given intensity v (kt) and the storm's shear:

    T(r, theta) = ambient
                  - depression_per_kt * v * exp(-(r / core_radius_km)^2)
                  + eye_gain * max(0, v - eye_threshold_kt)
                        * exp(-(r / eye_radius_km)^2)
                  + asymmetry_gain * shear_kt * cos(theta - shear_azimuth)
                        * (r / asym_radius_km) * exp(1 - r / asym_radius_km)

The shear term has zero azimuthal mean at every radius, so the closed-form
azimuthal-average profile is the first three terms.  Without an eye the field
is coldest at the center; once v crosses the eye threshold the center warms.

Intensity follows a logistic rise to a peak followed by exponential decay,
plus seeded Gaussian noise:

    base(t) = floor + (peak - floor) * sigmoid(growth * (t - t_mid)),  t <= t_peak
    base(t) = base(t_peak) * exp(-decay * (t - t_peak)),               t >  t_peak
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone

import numpy as np

from .ingest import BrightnessStamp, ShearRecord, Source, Status, TrackPoint
from .profiles import N_BINS, N_QUADRANTS, BIN_KM

EPOCH = datetime(2021, 8, 1, 0, 0, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SynthStormSpec:
    seed: int = 0
    storm_id: str = "SY012021"
    duration_h: int = 120
    # intensity curve
    floor_kt: float = 25.0
    peak_kt: float = 110.0
    growth_per_h: float = 0.08
    decay_per_h: float = 0.01
    peak_fraction: float = 0.6
    noise_std_kt: float = 1.5
    # structure coupling
    ambient_degc: float = 5.0
    depression_per_kt: float = 0.7
    core_radius_km: float = 150.0
    eye_threshold_kt: float = 65.0
    eye_gain: float = 0.9
    eye_radius_km: float = 30.0
    shear_kt: float = 10.0
    shear_heading_deg: float = 60.0
    asymmetry_gain: float = 0.35
    asym_radius_km: float = 180.0
    # grid
    pixel_km: float = 4.0
    grid_half_width: int = 102  # pixels from center to edge; 102*4 km > 400 km
    # track
    lat0: float = 15.0
    lon0: float = -45.0
    motion_deg_per_h: tuple[float, float] = (0.05, -0.08)

    def __post_init__(self):
        if self.noise_std_kt < 0:
            raise ValueError("noise std must be nonnegative")
        if self.eye_threshold_kt <= 0:
            raise ValueError("eye threshold must be positive")
        for name in ("growth_per_h", "decay_per_h", "depression_per_kt", "eye_gain"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass
class SynthStorm:
    spec: SynthStormSpec
    stamps: list[BrightnessStamp]              # 2-h cadence
    best_track: list[TrackPoint]               # 6-h cadence, rounded kt
    truth_times: list[datetime]                # 2-h cadence
    truth_vmax: np.ndarray                     # kt, unrounded
    shear: list[ShearRecord]                   # 6-h cadence

    @property
    def storm_id(self) -> str:
        return self.spec.storm_id


def intensity_curve(spec: SynthStormSpec, hours: np.ndarray) -> np.ndarray:
    """Noise-free intensity at the given hours since genesis."""
    t_peak = spec.peak_fraction * spec.duration_h
    t_mid = 0.5 * t_peak
    rise = spec.floor_kt + (spec.peak_kt - spec.floor_kt) / (
        1.0 + np.exp(-spec.growth_per_h * (hours - t_mid))
    )
    at_peak = spec.floor_kt + (spec.peak_kt - spec.floor_kt) / (
        1.0 + np.exp(-spec.growth_per_h * (t_peak - t_mid))
    )
    fall = at_peak * np.exp(-spec.decay_per_h * (hours - t_peak))
    return np.where(hours <= t_peak, rise, fall)


def stamp_field(spec: SynthStormSpec, vmax: float, radius_km: np.ndarray,
                azimuth_deg: np.ndarray) -> np.ndarray:
    """Deterministic stamp temperatures for one time; see the module docstring."""
    r = np.asarray(radius_km, dtype=float)
    depression = spec.depression_per_kt * vmax * np.exp(-((r / spec.core_radius_km) ** 2))
    eye = spec.eye_gain * max(0.0, vmax - spec.eye_threshold_kt) * np.exp(
        -((r / spec.eye_radius_km) ** 2)
    )
    # Shear heading is meteorological (0 = toward north); convert to the
    # east-counterclockwise azimuth convention used for quadrants.
    shear_azimuth = np.radians(90.0 - spec.shear_heading_deg)
    envelope = (r / spec.asym_radius_km) * np.exp(1.0 - r / spec.asym_radius_km)
    asym = spec.asymmetry_gain * spec.shear_kt * np.cos(np.radians(azimuth_deg) - shear_azimuth) * envelope
    return spec.ambient_degc - depression + eye + asym


def azimuthal_mean_profile(spec: SynthStormSpec, vmax: float, radius_km: np.ndarray) -> np.ndarray:
    """Closed-form azimuthal average of the stamp field (shear term drops)."""
    r = np.asarray(radius_km, dtype=float)
    depression = spec.depression_per_kt * vmax * np.exp(-((r / spec.core_radius_km) ** 2))
    eye = spec.eye_gain * max(0.0, vmax - spec.eye_threshold_kt) * np.exp(
        -((r / spec.eye_radius_km) ** 2)
    )
    return spec.ambient_degc - depression + eye


def gen_storm(spec: SynthStormSpec) -> SynthStorm:
    """Generate one storm: 2-h stamps, 6-h best track, 2-h truth intensities
    and 6-h shear records, all deterministic given the spec seed."""
    rng = np.random.default_rng(spec.seed)
    hours = np.arange(0, spec.duration_h + 1, 2)
    vmax = intensity_curve(spec, hours.astype(float))
    vmax = np.maximum(0.0, vmax + rng.normal(0.0, spec.noise_std_kt, size=vmax.shape))
    times = [EPOCH + timedelta(hours=int(h)) for h in hours]

    half = spec.grid_half_width
    n = 2 * half + 1
    north_km = (half - np.arange(n))[:, None] * spec.pixel_km
    east_km = (np.arange(n) - half)[None, :] * spec.pixel_km
    radius = np.hypot(north_km, east_km)
    azimuth = np.degrees(np.arctan2(north_km, east_km)) % 360.0

    stamps = []
    for t, v in zip(times, vmax):
        grid = stamp_field(spec, float(v), radius, azimuth).astype(np.float32)
        stamps.append(
            BrightnessStamp(
                storm_id=spec.storm_id, time=t, grid=grid,
                pixel_km=spec.pixel_km, center_index=(half, half),
            )
        )

    best_track = []
    shear = []
    for i, (t, h) in enumerate(zip(times, hours)):
        if h % 6 != 0:
            continue
        lat = spec.lat0 + spec.motion_deg_per_h[0] * float(h)
        lon = spec.lon0 + spec.motion_deg_per_h[1] * float(h)
        v = float(np.round(vmax[i]))
        status = Status.HU if v >= 64 else Status.TS if v >= 34 else Status.TD
        best_track.append(
            TrackPoint(
                storm_id=spec.storm_id, time=t, lat=lat, lon=lon,
                vmax=v, status=status, source=Source.BEST_TRACK,
            )
        )
        shear.append(
            ShearRecord(
                storm_id=spec.storm_id, time=t,
                magnitude=spec.shear_kt, direction=spec.shear_heading_deg % 360.0,
            )
        )
    return SynthStorm(
        spec=spec, stamps=stamps, best_track=best_track,
        truth_times=times, truth_vmax=vmax, shear=shear,
    )


def operational_series(storm: SynthStorm, noise_std_kt: float = 2.0, seed_offset: int = 0xC0FFEE) -> list[TrackPoint]:
    """Best-track series perturbed by seeded noise, emulating real-time
    analyses; values rounded to whole knots and floored at 0."""
    rng = np.random.default_rng(storm.spec.seed ^ seed_offset)
    out = []
    for p in storm.best_track:
        v = max(0.0, round(p.vmax + rng.normal(0.0, noise_std_kt)))
        out.append(replace(p, vmax=v, source=Source.OPERATIONAL))
    return out


# ---------------------------------------------------------------------------
# First-order autoregressive profile process (training oracle)


@dataclass
class ArProfileOracle:
    """Closed-form statistics of the AR(1) profile process.

    Every (bin, quadrant) scalar evolves independently across rows:
        row 0:   N(mean, sigma^2 / (1 - phi^2))
        row t+1: N(mean + phi * (row_t - mean), sigma^2)
    """

    mean: float
    phi: float
    sigma: float

    @property
    def stationary_std(self) -> float:
        return self.sigma / math.sqrt(1.0 - self.phi**2)

    def conditional_mean(self, previous_row: np.ndarray) -> np.ndarray:
        return self.mean + self.phi * (np.asarray(previous_row) - self.mean)

    @property
    def conditional_std(self) -> float:
        return self.sigma

    def mean_nll_per_scalar(self, n_rows: int) -> float:
        """Exact expected negative log-density per scalar of an n_rows window,
        in temperature space (nats).  Row 0 contributes the stationary
        marginal, later rows the innovation law."""
        h0 = 0.5 * math.log(2.0 * math.pi * self.stationary_std**2) + 0.5
        h1 = 0.5 * math.log(2.0 * math.pi * self.sigma**2) + 0.5
        return (h0 + (n_rows - 1) * h1) / n_rows

    def window_log_density(self, window: np.ndarray) -> float:
        """Exact log-density of one (H, 80, 4) window under the process."""
        w = np.asarray(window, dtype=float)
        z0 = (w[0] - self.mean) / self.stationary_std
        ll = np.sum(-0.5 * z0**2 - math.log(self.stationary_std) - 0.5 * math.log(2 * math.pi))
        if w.shape[0] > 1:
            resid = w[1:] - self.conditional_mean(w[:-1])
            z = resid / self.sigma
            ll += np.sum(-0.5 * z**2 - math.log(self.sigma) - 0.5 * math.log(2 * math.pi))
        return float(ll)


def gen_ar_profile_process(seed: int, mean: float = -40.0, phi: float = 0.6,
                           sigma: float = 2.0, n_rows: int = 64) -> tuple[np.ndarray, ArProfileOracle]:
    """Simulate the AR(1) profile process.

    Returns (rows, oracle) where rows has shape (n_rows, 80, 4) and starts
    from the stationary distribution.
    """
    if not abs(phi) < 1.0:
        raise ValueError("autoregressive coefficient must satisfy |phi| < 1")
    rng = np.random.default_rng(seed)
    oracle = ArProfileOracle(mean=mean, phi=phi, sigma=sigma)
    rows = np.empty((n_rows, N_BINS, N_QUADRANTS))
    rows[0] = mean + oracle.stationary_std * rng.standard_normal((N_BINS, N_QUADRANTS))
    for t in range(1, n_rows):
        rows[t] = oracle.conditional_mean(rows[t - 1]) + sigma * rng.standard_normal((N_BINS, N_QUADRANTS))
    return rows, oracle


def sliding_windows(rows: np.ndarray, height: int) -> np.ndarray:
    """All contiguous height-row windows of a (T, 80, 4) series, stacked."""
    rows = np.asarray(rows)
    if rows.shape[0] < height:
        return np.empty((0, height) + rows.shape[1:])
    return np.stack([rows[i : i + height] for i in range(rows.shape[0] - height + 1)])


# ---------------------------------------------------------------------------
# Corpus


@dataclass
class SynthCorpus:
    train: list[SynthStorm]
    validation: list[SynthStorm]
    test: list[SynthStorm]

    def all_storms(self) -> list[SynthStorm]:
        return self.train + self.validation + self.test


def storm_specs(n_storms: int, seed: int) -> list[SynthStormSpec]:
    """Deterministic per-storm spec variations from a master seed."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_storms):
        specs.append(
            SynthStormSpec(
                seed=int(rng.integers(0, 2**31 - 1)),
                storm_id=f"SY{i + 1:02d}2021",
                duration_h=int(rng.integers(96, 168) // 6 * 6),
                peak_kt=float(rng.uniform(70.0, 130.0)),
                growth_per_h=float(rng.uniform(0.05, 0.11)),
                decay_per_h=float(rng.uniform(0.006, 0.02)),
                noise_std_kt=float(rng.uniform(1.0, 2.5)),
                shear_kt=float(rng.uniform(2.0, 25.0)),
                shear_heading_deg=float(rng.uniform(0.0, 360.0)),
                lat0=float(rng.uniform(10.0, 25.0)),
                lon0=float(rng.uniform(-70.0, -30.0)),
            )
        )
    return specs


def gen_corpus(n_storms: int, seed: int) -> SynthCorpus:
    """Generate storms and split them 60/20/20 at the storm level."""
    if n_storms < 3:
        raise ValueError("need at least 3 storms for a 3-way split")
    storms = [gen_storm(spec) for spec in storm_specs(n_storms, seed)]
    n_val = max(1, int(round(0.2 * n_storms)))
    n_test = max(1, int(round(0.2 * n_storms)))
    n_train = n_storms - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_storms} storms leave no training split")
    return SynthCorpus(
        train=storms[:n_train],
        validation=storms[n_train : n_train + n_val],
        test=storms[n_train + n_val :],
    )
