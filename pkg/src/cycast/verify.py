"""Structural and intensity verification with binned breakdowns.

Trajectory scores follow the ensemble-deviation definitions: with simulated
profiles BT_qi(r) and truth tau_q(r),

    RMV  = sqrt(mean over radius of mean over quadrants and members of
                (BT_qi(r) - tau_q(r))^2)
    MAD  = mean |BT_qi(r) - tau_q(r)|
    Bias = mean (BT_qi(r) - tau_q(r))

with the radial integral discretized as the unweighted mean over the 80
bins.  Combining across forecast times averages MAD and bias arithmetically
and RMV in quadrature.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Mapping, Sequence

import numpy as np

from .profiles import N_BINS, N_QUADRANTS, N_OBSERVED_ROWS, StructuralTrajectory

LEAD_HOURS = (2, 4, 6, 8, 10, 12)


@dataclass
class TrajectoryScore:
    rmv: float
    mad: float
    bias: float
    per_lead: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    n_times: int = 1
    n_members: int = 1


@dataclass
class IntensityScore:
    rmse: float
    mae: float
    bias: float
    n: int


def trajectory_score(members: Sequence[StructuralTrajectory] | np.ndarray,
                     truth_rows: np.ndarray) -> TrajectoryScore:
    """Score one forecast time's simulated members against truth profiles.

    ``members`` is a list of completed trajectories (or an (n, steps, 80, 4)
    array of their simulated rows); ``truth_rows`` is (steps, 80, 4).  The
    top-level values pool every forecast row; per_lead holds the row at each
    2-h lead.
    """
    if isinstance(members, np.ndarray):
        sim = np.asarray(members, dtype=float)
    else:
        sim = np.stack([m.rows[m.n_observed :] for m in members]).astype(float)
    truth = np.asarray(truth_rows, dtype=float)
    if sim.ndim != 4 or sim.shape[1:] != truth.shape or truth.shape[1:] != (N_BINS, N_QUADRANTS):
        raise ValueError(f"member rows {sim.shape} incompatible with truth {truth.shape}")

    dev = sim - truth[None]
    per_lead = {}
    for j in range(truth.shape[0]):
        d = dev[:, j]
        per_lead[2 * (j + 1)] = (
            float(np.sqrt(np.mean(d**2))),
            float(np.mean(np.abs(d))),
            float(np.mean(d)),
        )
    return TrajectoryScore(
        rmv=float(np.sqrt(np.mean(dev**2))),
        mad=float(np.mean(np.abs(dev))),
        bias=float(np.mean(dev)),
        per_lead=per_lead,
        n_times=1,
        n_members=sim.shape[0],
    )


def combine_scores(scores: Sequence[TrajectoryScore]) -> TrajectoryScore:
    """Equal-weight combination across forecast times: MAD and bias average
    arithmetically, RMV in quadrature."""
    if not scores:
        raise ValueError("no scores to combine")
    leads = sorted({lead for s in scores for lead in s.per_lead})
    per_lead = {}
    for lead in leads:
        rows = [s.per_lead[lead] for s in scores if lead in s.per_lead]
        per_lead[lead] = (
            math.sqrt(sum(r[0] ** 2 for r in rows) / len(rows)),
            sum(r[1] for r in rows) / len(rows),
            sum(r[2] for r in rows) / len(rows),
        )
    return TrajectoryScore(
        rmv=math.sqrt(sum(s.rmv**2 for s in scores) / len(scores)),
        mad=sum(s.mad for s in scores) / len(scores),
        bias=sum(s.bias for s in scores) / len(scores),
        per_lead=per_lead,
        n_times=sum(s.n_times for s in scores),
        n_members=scores[0].n_members,
    )


def intensity_score(predictions, truths) -> IntensityScore:
    pred = np.asarray(predictions, dtype=float)
    truth = np.asarray(truths, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty score input")
    err = pred - truth
    return IntensityScore(
        rmse=float(np.sqrt(np.mean(err**2))),
        mae=float(np.mean(np.abs(err))),
        bias=float(np.mean(err)),
        n=int(err.size),
    )


# ---------------------------------------------------------------------------
# Binned verification


@dataclass
class VerificationRecord:
    """One verified forecast with its binning metadata."""

    truth: float
    prediction: float
    prior_change_6h: float | None = None
    shear_magnitude: float | None = None
    shear_direction: float | None = None
    storm_id: str | None = None
    valid_time: datetime | None = None


UNBINNED = "unbinned"

SHEAR_MAGNITUDE_BINS = (("0-10kt", 0.0, 10.0), ("10-20kt", 10.0, 20.0), ("20+kt", 20.0, math.inf))
CATEGORY_BINS = (("TD", -math.inf, 34.0), ("TS", 34.0, 64.0), ("HU", 64.0, 96.0), ("MH", 96.0, math.inf))


def shear_direction_quadrant(heading_deg: float) -> str:
    """Quadrant of a meteorological heading, half-open 90-degree sectors
    centered on the inter-cardinal directions: NE=[0,90), SE=[90,180),
    SW=[180,270), NW=[270,360)."""
    h = heading_deg % 360.0
    return ("NE", "SE", "SW", "NW")[int(h // 90.0)]


def evolution_class(change_6h: float) -> str:
    """Weakening below -5 kt, intensifying above +5 kt, maintenance when the
    6-hour change is at most 5 kt in magnitude."""
    if change_6h < -5.0:
        return "weakening"
    if change_6h > 5.0:
        return "intensifying"
    return "maintenance"


def _range_bin(value: float, bins) -> str:
    for label, lo, hi in bins:
        if lo <= value < hi:
            return label
    return UNBINNED


def binned_verification(records: Sequence[VerificationRecord]) -> dict[str, dict[str, IntensityScore]]:
    """Per-bin intensity scores for the four standard breakdowns.

    Records missing a bin key are routed to an "unbinned" row of that table
    (and still counted there).
    """
    tables: dict[str, dict[str, list[VerificationRecord]]] = {
        "shear_magnitude": {},
        "shear_direction": {},
        "category": {},
        "evolution": {},
    }
    for rec in records:
        keys = {
            "shear_magnitude": (
                _range_bin(rec.shear_magnitude, SHEAR_MAGNITUDE_BINS)
                if rec.shear_magnitude is not None else UNBINNED
            ),
            "shear_direction": (
                shear_direction_quadrant(rec.shear_direction)
                if rec.shear_direction is not None else UNBINNED
            ),
            "category": _range_bin(rec.truth, CATEGORY_BINS),
            "evolution": (
                evolution_class(rec.prior_change_6h)
                if rec.prior_change_6h is not None else UNBINNED
            ),
        }
        for table, label in keys.items():
            tables[table].setdefault(label, []).append(rec)

    out: dict[str, dict[str, IntensityScore]] = {}
    for table, groups in tables.items():
        out[table] = {}
        for label, group in groups.items():
            out[table][label] = intensity_score(
                [g.prediction for g in group], [g.truth for g in group]
            )
        total = intensity_score([r.prediction for r in records], [r.truth for r in records])
        out[table]["total"] = total
    return out


# ---------------------------------------------------------------------------
# Baselines


def persistence_trajectory_baseline(observed: StructuralTrajectory, steps: int = 6) -> StructuralTrajectory:
    """Member stand-in whose forecast rows all repeat the 0-h profile."""
    if observed.n_observed != N_OBSERVED_ROWS or observed.n_simulated != 0:
        raise ValueError("baseline needs a pure 13-row observed trajectory")
    last = observed.rows[-1]
    rows = np.concatenate([observed.rows, np.repeat(last[None], steps, axis=0)], axis=0)
    return StructuralTrajectory(
        rows=rows, n_observed=N_OBSERVED_ROWS, n_simulated=steps, anchor_time=observed.anchor_time
    )


def intensity_persistence_baseline(series: Mapping[datetime, float], t: datetime,
                                   lead_h: int = 6) -> float:
    """Persistence forecast for t + lead: the intensity at t."""
    if t not in series:
        raise ValueError(f"no intensity at {t.isoformat()}")
    return float(series[t])


# ---------------------------------------------------------------------------
# Table output


_BIN_ORDER = {
    "shear_magnitude": ["0-10kt", "10-20kt", "20+kt"],
    "shear_direction": ["SW", "SE", "NE", "NW"],
    "category": ["TD", "TS", "HU", "MH"],
    "evolution": ["weakening", "maintenance", "intensifying"],
}


def _table_rows(table: str, scores: dict[str, IntensityScore]):
    order = [b for b in _BIN_ORDER.get(table, []) if b in scores]
    extras = [b for b in scores if b not in order and b != "total"]
    for label in order + sorted(extras) + ["total"]:
        yield label, scores[label]


def format_tables(tables: dict[str, dict[str, IntensityScore]]) -> str:
    """Aligned-text rendering, one block per breakdown."""
    out = io.StringIO()
    for table, scores in tables.items():
        out.write(f"{table}\n")
        out.write(f"{'bin':<14}{'RMSE':>9}{'MAE':>9}{'Bias':>9}{'N':>7}\n")
        for label, s in _table_rows(table, scores):
            out.write(f"{label:<14}{s.rmse:>9.2f}{s.mae:>9.2f}{s.bias:>9.2f}{s.n:>7d}\n")
        out.write("\n")
    return out.getvalue()


def write_tables_csv(tables: dict[str, dict[str, IntensityScore]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["table", "bin", "rmse_kt", "mae_kt", "bias_kt", "n"])
        for table, scores in tables.items():
            for label, s in _table_rows(table, scores):
                writer.writerow([table, label, repr(s.rmse), repr(s.mae), repr(s.bias), s.n])


def write_trajectory_scores_csv(scores: dict[str, TrajectoryScore], path: str | os.PathLike) -> None:
    """Per-model trajectory verification, one row per (model, lead)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "lead_h", "rmv_degc", "mad_degc", "bias_degc", "n_times"])
        for model, score in scores.items():
            for lead in sorted(score.per_lead):
                rmv, mad, bias = score.per_lead[lead]
                writer.writerow([model, lead, repr(rmv), repr(mad), repr(bias), score.n_times])
            writer.writerow([model, "all", repr(score.rmv), repr(score.mad), repr(score.bias), score.n_times])
