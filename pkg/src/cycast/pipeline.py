"""Chains structural simulation into +6 h / +12 h intensity forecasts.

For a forecast anchored at t, simulated rows extend the observed trajectory
to t + lead; the 13-row window ending at t + lead is passed to the intensity
network together with persistence features.  At 12-h lead the unknown
intensity at t + 6 h is filled per member by that member's own +6 h
prediction (a configurable alternative uses the ensemble mean), with the
2-h values between t and t + 6 h interpolated linearly.

Guidance output per anchor: a member-intensity histogram, per-quadrant
simulated-profile spaghetti with the ensemble mean overlaid, Hovmoller
renderings of selected members, and one machine-readable record per
anchor x lead in line-delimited JSON.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Mapping, Sequence

import numpy as np

from . import nowcast as nowcast_mod
from . import structsim as structsim_mod
from .ingest import TrackPoint, interpolate_track
from .nowcast import NowcastModel, build_features, predict_now
from .profiles import (
    BIN_KM,
    N_BINS,
    N_OBSERVED_ROWS,
    N_QUADRANTS,
    QUADRANT_ORDER,
    RadialProfileSet,
    StructuralTrajectory,
    assemble_trajectory,
    compute_radial_profiles,
    render_hovmoller,
)
from .structsim import StructSimModel, ensemble

VALID_LEADS_H = (6, 12)
ROW_HOURS = 2


@dataclass
class ForecastEnsemble:
    anchor_time: datetime
    lead_h: int
    trajectories: list[StructuralTrajectory]
    member_intensities: np.ndarray
    storm_id: str | None = None

    def __post_init__(self):
        self.member_intensities = np.asarray(self.member_intensities, dtype=float)
        if len(self.trajectories) != self.member_intensities.shape[0]:
            raise ValueError("one intensity per trajectory required")
        steps = self.lead_h // ROW_HOURS
        if any(t.n_simulated < steps for t in self.trajectories):
            raise ValueError(f"trajectories lack the {steps} simulated rows for lead {self.lead_h} h")

    @property
    def n(self) -> int:
        return self.member_intensities.shape[0]

    @property
    def mean_intensity(self) -> float:
        return float(self.member_intensities.mean())

    @property
    def spread(self) -> float:
        return float(self.member_intensities.std())


def _window_ending(member: StructuralTrajectory, rows_from_end: int) -> np.ndarray:
    """13-row slice of a completed trajectory ending rows_from_end rows after
    the anchor."""
    end = member.n_observed + rows_from_end
    return member.rows[end - N_OBSERVED_ROWS : end]


def forecast(sim_model: StructSimModel, now_model: NowcastModel,
             profiles_by_time: Mapping[datetime, RadialProfileSet],
             operational_2h: Mapping[datetime, float], t: datetime, lead_h: int,
             n: int, master_seed, chain_intensity: str = "member",
             precomputed_members: Sequence[StructuralTrajectory] | None = None,
             storm_id: str | None = None) -> ForecastEnsemble:
    """Ensemble intensity forecast for t + lead.

    ``operational_2h`` is the 2-h interpolated real-time intensity series and
    must cover t-32h .. t.  ``precomputed_members`` lets externally simulated
    trajectories be injected; given the same master seed the result is
    identical to the internal path.
    """
    if lead_h not in VALID_LEADS_H:
        raise ValueError(f"lead must be one of {VALID_LEADS_H}, got {lead_h}")
    if chain_intensity not in ("member", "ensemble_mean"):
        raise ValueError(f"unknown chain_intensity {chain_intensity!r}")
    needed = [t - timedelta(hours=h) for h in range(0, 34, 2)]
    missing = [w for w in needed if w not in operational_2h]
    if missing:
        raise ValueError(
            "operational series missing times: " + ", ".join(m.isoformat() for m in missing)
        )

    steps = lead_h // ROW_HOURS
    observed = assemble_trajectory(profiles_by_time, t)
    if precomputed_members is not None:
        members = list(precomputed_members)
        if len(members) != n:
            raise ValueError(f"expected {n} precomputed members, got {len(members)}")
    else:
        members = ensemble(sim_model, observed, n, steps, master_seed)

    series = dict(operational_2h)
    delta_res = now_model.config.delta_resolution

    if lead_h == 6:
        intensities = []
        for member in members:
            feats = build_features(_window_ending(member, 3), series, t + timedelta(hours=6),
                                   delta_resolution=delta_res)
            intensities.append(predict_now(now_model, feats))
    else:
        six_hour = []
        for member in members:
            feats = build_features(_window_ending(member, 3), series, t + timedelta(hours=6),
                                   delta_resolution=delta_res)
            six_hour.append(predict_now(now_model, feats))
        if chain_intensity == "ensemble_mean":
            six_hour = [float(np.mean(six_hour))] * len(members)
        intensities = []
        for member, y6 in zip(members, six_hour):
            # Fill t+2 .. t+6 by linear interpolation between the last
            # operational value and this member's own +6 h prediction.
            chained = dict(series)
            y0 = series[t]
            for h in (2, 4, 6):
                chained[t + timedelta(hours=h)] = y0 + (y6 - y0) * h / 6.0
            feats = build_features(_window_ending(member, 6), chained, t + timedelta(hours=12),
                                   delta_resolution=delta_res)
            intensities.append(predict_now(now_model, feats))

    return ForecastEnsemble(
        anchor_time=t, lead_h=lead_h, trajectories=members,
        member_intensities=np.array(intensities), storm_id=storm_id,
    )


# ---------------------------------------------------------------------------
# Guidance output


_TIME_FMT = "%Y-%m-%dT%H:%M:%SZ"


def guidance_record(ens: ForecastEnsemble) -> dict:
    return {
        "storm_id": ens.storm_id,
        "anchor_time": ens.anchor_time.astimezone(timezone.utc).strftime(_TIME_FMT),
        "lead_h": ens.lead_h,
        "n_members": ens.n,
        "members_kt": [round(float(v), 4) for v in ens.member_intensities],
        "mean_kt": round(ens.mean_intensity, 4),
        "spread_kt": round(ens.spread, 4),
    }


def write_guidance_records(ensembles: Sequence[ForecastEnsemble], path: str | os.PathLike,
                           append: bool = False) -> None:
    """Line-delimited JSON, one record per anchor x lead."""
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for ens in ensembles:
            fh.write(json.dumps(guidance_record(ens), sort_keys=True) + "\n")


def read_guidance_records(path: str | os.PathLike) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def histogram_figure(ens: ForecastEnsemble):
    """Member-intensity histogram with the ensemble mean marked."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(ens.member_intensities, bins=min(15, max(5, ens.n // 2)), color="steelblue", alpha=0.8)
    ax.axvline(ens.mean_intensity, color="red", lw=2, label=f"mean {ens.mean_intensity:.1f} kt")
    ax.set_xlabel("forecast intensity (kt)")
    ax.set_ylabel("members")
    ax.set_title(f"{ens.storm_id or ''} +{ens.lead_h} h intensity ensemble".strip())
    ax.legend()
    return fig


def spaghetti_figure(ens: ForecastEnsemble):
    """Per-quadrant member profiles at the forecast lead with the ensemble
    mean overlaid; one gray line per member, the red overlay last."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = ens.lead_h // ROW_HOURS
    radius = np.arange(N_BINS) * BIN_KM + BIN_KM / 2
    lead_rows = np.stack([m.rows[m.n_observed + steps - 1] for m in ens.trajectories])
    mean_row = lead_rows.mean(axis=0)
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True, sharey=True)
    for q, (name, ax) in enumerate(zip(QUADRANT_ORDER, axes.ravel())):
        for m in range(ens.n):
            ax.plot(radius, lead_rows[m, :, q], color="gray", lw=0.6, alpha=0.5)
        ax.plot(radius, mean_row[:, q], color="red", lw=1.8, label="ensemble mean")
        ax.set_title(name)
        if q == 0:
            ax.legend(fontsize=8)
    for ax in axes[-1]:
        ax.set_xlabel("radius (km)")
    for ax in axes[:, 0]:
        ax.set_ylabel("brightness temperature (degC)")
    fig.suptitle(f"simulated profiles at +{ens.lead_h} h")
    fig.tight_layout()
    return fig


def emit_guidance(ens: ForecastEnsemble, out_dir: str | os.PathLike,
                  n_hovmoller: int = 3) -> list[str]:
    """Write guidance figures plus the machine-readable record; returns the
    created file paths."""
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    stamp = ens.anchor_time.strftime("%Y%m%d%H")
    base = f"{ens.storm_id or 'storm'}_{stamp}_{ens.lead_h:02d}h"
    created = []

    record_path = os.path.join(out_dir, f"{base}_guidance.jsonl")
    write_guidance_records([ens], record_path)
    created.append(record_path)

    for name, fig in (("histogram", histogram_figure(ens)), ("profiles", spaghetti_figure(ens))):
        path = os.path.join(out_dir, f"{base}_{name}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        created.append(path)

    for m in range(min(n_hovmoller, ens.n)):
        hov_path = os.path.join(out_dir, f"{base}_member{m:02d}_hovmoller.png")
        render_hovmoller(ens.trajectories[m], hov_path)
        created.append(hov_path)
    return created


# ---------------------------------------------------------------------------
# Corpus orchestration shared by the CLI and the verification harness


def intensity_series_2h(points: Sequence[TrackPoint]) -> dict[datetime, float]:
    """2-h interpolated intensity lookup from a 6-h track."""
    return {p.time: float(p.vmax) for p in interpolate_track(points, timedelta(hours=2))}


def profiles_from_stamps(stamps) -> dict[datetime, RadialProfileSet]:
    return {s.time: compute_radial_profiles(s) for s in stamps}


def sim_windows_from_profiles(profiles_by_time: Mapping[datetime, RadialProfileSet]) -> np.ndarray:
    """All 19-row training windows from one storm's 2-h profile series."""
    times = sorted(profiles_by_time)
    rows = np.stack([profiles_by_time[t].values.T for t in times])  # (T, 80, 4)
    height = structsim_mod.WINDOW_ROWS
    if rows.shape[0] < height:
        return np.empty((0, height, N_BINS, N_QUADRANTS))
    return np.stack([rows[i : i + height] for i in range(rows.shape[0] - height + 1)])


@dataclass
class StormData:
    """Everything the forecast/verification loop needs for one storm."""

    storm_id: str
    profiles_by_time: dict[datetime, RadialProfileSet]
    truth_2h: dict[datetime, float]          # interpolated best-track, kt
    operational_2h: dict[datetime, float]    # interpolated real-time series, kt
    shear_by_time: dict[datetime, tuple[float, float | None]] = field(default_factory=dict)

    @classmethod
    def from_synth(cls, storm, operational_noise_kt: float = 2.0) -> "StormData":
        from .synth import operational_series

        return cls(
            storm_id=storm.storm_id,
            profiles_by_time=profiles_from_stamps(storm.stamps),
            truth_2h=intensity_series_2h(storm.best_track),
            operational_2h=intensity_series_2h(
                operational_series(storm, noise_std_kt=operational_noise_kt)
            ),
            shear_by_time={r.time: (r.magnitude, r.direction) for r in storm.shear},
        )


def candidate_anchors(storm: StormData, lead_h: int, stride_h: int = 6,
                      max_anchors: int | None = None) -> list[datetime]:
    """Synoptic anchor times with full coverage: profiles over t-24h..t+lead
    (truth rows included for scoring), operational series over t-32h..t and
    truth at the valid time and 6 h before it."""
    anchors = []
    for t in sorted(storm.profiles_by_time):
        if t.hour % stride_h != 0 or t.hour % 6 != 0:
            continue
        history = [t - timedelta(hours=h) for h in range(0, 26, 2)]
        future = [t + timedelta(hours=h) for h in range(2, lead_h + 1, 2)]
        ops = [t - timedelta(hours=h) for h in range(0, 34, 2)]
        valid = t + timedelta(hours=lead_h)
        if all(h in storm.profiles_by_time for h in history + future) and \
           all(o in storm.operational_2h for o in ops) and \
           valid in storm.truth_2h and (valid - timedelta(hours=6)) in storm.truth_2h:
            anchors.append(t)
    if max_anchors is not None and len(anchors) > max_anchors:
        step = len(anchors) / max_anchors
        anchors = [anchors[int(i * step)] for i in range(max_anchors)]
    return anchors


@dataclass
class BulkVerification:
    """Outputs of a verification sweep at one lead."""

    lead_h: int
    records: list
    baseline_records: list
    trajectory_score: object
    persistence_trajectory_score: object
    ensembles: list[ForecastEnsemble]


def run_bulk_verification(sim_model: StructSimModel, now_model: NowcastModel,
                          storms: Sequence[StormData], lead_h: int, members: int,
                          master_seed: int, stride_h: int = 6,
                          max_anchors_per_storm: int | None = None,
                          chain_intensity: str = "member",
                          frozen_profiles: bool = False) -> BulkVerification:
    """Forecast every covered anchor and score against best-track truth.

    ``frozen_profiles`` swaps the simulated members for the persistence
    trajectory baseline (0-h profiles repeated), keeping the rest of the
    chain identical.  Per-anchor rng streams are derived from (master_seed,
    storm, anchor index) so runs are reproducible and order-independent.
    """
    from .verify import (
        VerificationRecord,
        combine_scores,
        persistence_trajectory_baseline,
        trajectory_score,
    )

    steps = lead_h // ROW_HOURS
    records, baseline_records, ensembles = [], [], []
    traj_scores, persist_scores = [], []
    for storm_index, storm in enumerate(storms):
        anchors = candidate_anchors(storm, lead_h, stride_h, max_anchors_per_storm)
        for a_index, t in enumerate(anchors):
            seed = np.random.SeedSequence((master_seed, storm_index, a_index))
            if frozen_profiles:
                observed = assemble_trajectory(storm.profiles_by_time, t)
                frozen = persistence_trajectory_baseline(observed, steps)
                ens = forecast(
                    sim_model, now_model, storm.profiles_by_time, storm.operational_2h,
                    t, lead_h, members, seed, chain_intensity=chain_intensity,
                    precomputed_members=[frozen] * members, storm_id=storm.storm_id,
                )
            else:
                ens = forecast(
                    sim_model, now_model, storm.profiles_by_time, storm.operational_2h,
                    t, lead_h, members, seed, chain_intensity=chain_intensity,
                    storm_id=storm.storm_id,
                )
            ensembles.append(ens)
            valid = t + timedelta(hours=lead_h)
            truth = storm.truth_2h[valid]
            shear = storm.shear_by_time.get(t, (None, None))
            records.append(
                VerificationRecord(
                    truth=truth,
                    prediction=ens.mean_intensity,
                    prior_change_6h=truth - storm.truth_2h[valid - timedelta(hours=6)],
                    shear_magnitude=shear[0],
                    shear_direction=shear[1],
                    storm_id=storm.storm_id,
                    valid_time=valid,
                )
            )
            baseline_records.append(
                VerificationRecord(
                    truth=truth,
                    prediction=storm.operational_2h[t],
                    prior_change_6h=truth - storm.truth_2h[valid - timedelta(hours=6)],
                    shear_magnitude=shear[0],
                    shear_direction=shear[1],
                    storm_id=storm.storm_id,
                    valid_time=valid,
                )
            )
            truth_rows = np.stack(
                [storm.profiles_by_time[t + timedelta(hours=2 * (j + 1))].values.T
                 for j in range(steps)]
            )
            traj_scores.append(trajectory_score(ens.trajectories, truth_rows))
            observed = assemble_trajectory(storm.profiles_by_time, t)
            persist_scores.append(
                trajectory_score([persistence_trajectory_baseline(observed, steps)], truth_rows)
            )
    if not records:
        raise ValueError("no anchors with full coverage; storms too short?")
    return BulkVerification(
        lead_h=lead_h,
        records=records,
        baseline_records=baseline_records,
        trajectory_score=combine_scores(traj_scores),
        persistence_trajectory_score=combine_scores(persist_scores),
        ensembles=ensembles,
    )


def nowcast_pairs(profiles_by_time: Mapping[datetime, RadialProfileSet],
                  intensity_2h: Mapping[datetime, float],
                  targets_2h: Mapping[datetime, float],
                  delta_resolution: str = "six_hourly",
                  synoptic_only: bool = False):
    """(features, target) pairs at every covered 2-h time.

    ``intensity_2h`` feeds the persistence features (best track when
    training, operational when forecasting); ``targets_2h`` supplies the
    labels.  ``synoptic_only`` restricts to 00/06/12/18 UTC valid times.
    """
    features, targets = [], []
    times = sorted(profiles_by_time)
    for t in times:
        if synoptic_only and t.hour % 6 != 0:
            continue
        if t not in targets_2h:
            continue
        try:
            traj = assemble_trajectory(profiles_by_time, t)
            feats = build_features(traj, intensity_2h, t, delta_resolution=delta_resolution)
        except ValueError:
            continue
        features.append(feats)
        targets.append(targets_2h[t])
    return features, np.array(targets, dtype=float)
