import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cycast import verify
from cycast.profiles import N_BINS, StructuralTrajectory
from cycast.verify import (
    IntensityScore,
    TrajectoryScore,
    VerificationRecord,
    binned_verification,
    combine_scores,
    intensity_persistence_baseline,
    intensity_score,
    persistence_trajectory_baseline,
    shear_direction_quadrant,
    trajectory_score,
)

T0 = datetime(2021, 8, 2, 0, tzinfo=timezone.utc)


def oracle_trajectory_score(sim, truth):
    """Double-loop restatement of the deviation metrics."""
    n, steps = sim.shape[:2]
    sq = ab = raw = 0.0
    count = 0
    for i in range(n):
        for j in range(steps):
            for k in range(N_BINS):
                for q in range(4):
                    d = sim[i, j, k, q] - truth[j, k, q]
                    sq += d * d
                    ab += abs(d)
                    raw += d
                    count += 1
    return math.sqrt(sq / count), ab / count, raw / count


class TestTrajectoryScore:
    def test_perfect_members_score_zero(self):
        truth = np.random.default_rng(0).uniform(-80, 0, size=(3, N_BINS, 4))
        sim = np.repeat(truth[None], 4, axis=0)
        s = trajectory_score(sim, truth)
        assert s.rmv == s.mad == s.bias == 0.0
        assert set(s.per_lead) == {2, 4, 6}

    def test_constant_offset(self):
        truth = np.zeros((2, N_BINS, 4))
        sim = np.full((1, 2, N_BINS, 4), 2.0)
        s = trajectory_score(sim, truth)
        assert (s.rmv, s.mad, s.bias) == (2.0, 2.0, 2.0)
        assert s.per_lead[4] == (2.0, 2.0, 2.0)

    def test_mixed_offsets_match_oracle(self):
        rng = np.random.default_rng(1)
        truth = rng.uniform(-60, 0, size=(2, N_BINS, 4))
        sim = truth[None] + rng.normal(0, 3, size=(2, 2, N_BINS, 4))
        s = trajectory_score(sim, truth)
        rmv, mad, bias = oracle_trajectory_score(sim, truth)
        assert s.rmv == pytest.approx(rmv, abs=1e-9)
        assert s.mad == pytest.approx(mad, abs=1e-9)
        assert s.bias == pytest.approx(bias, abs=1e-9)

    def test_accepts_trajectories(self):
        rng = np.random.default_rng(2)
        obs = rng.uniform(-60, 0, size=(13, N_BINS, 4))
        truth = rng.uniform(-60, 0, size=(3, N_BINS, 4))
        members = []
        for _ in range(2):
            rows = np.concatenate([obs, truth + rng.normal(0, 1, truth.shape)])
            members.append(
                StructuralTrajectory(rows=rows, n_observed=13, n_simulated=3, anchor_time=T0)
            )
        s = trajectory_score(members, truth)
        assert s.n_members == 2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            trajectory_score(np.zeros((1, 2, N_BINS, 4)), np.zeros((3, N_BINS, 4)))

    def test_translation_shifts_bias_only(self):
        rng = np.random.default_rng(3)
        truth = rng.uniform(-60, 0, size=(2, N_BINS, 4))
        sim = truth[None] + rng.normal(0, 2, size=(3, 2, N_BINS, 4))
        a = trajectory_score(sim, truth)
        b = trajectory_score(sim + 5.0, truth)
        assert b.bias == pytest.approx(a.bias + 5.0, abs=1e-9)
        # uniform member deviations: rmv^2 - bias^2 invariant under shift
        uniform = truth[None] + 2.5
        c = trajectory_score(uniform, truth)
        d = trajectory_score(uniform + 5.0, truth)
        assert c.rmv**2 - c.bias**2 == pytest.approx(d.rmv**2 - d.bias**2, abs=1e-9)


class TestCombineScores:
    def test_quadrature_rmv(self):
        a = TrajectoryScore(rmv=3.0, mad=1.0, bias=0.5, per_lead={2: (3.0, 1.0, 0.5)})
        b = TrajectoryScore(rmv=4.0, mad=3.0, bias=-0.5, per_lead={2: (4.0, 3.0, -0.5)})
        c = combine_scores([a, b])
        assert c.rmv == pytest.approx(math.sqrt(12.5))
        assert c.mad == pytest.approx(2.0)
        assert c.bias == pytest.approx(0.0)
        assert c.per_lead[2][0] == pytest.approx(math.sqrt(12.5))

    def test_identity_on_single_and_constant(self):
        a = TrajectoryScore(rmv=2.0, mad=1.5, bias=-0.25, per_lead={})
        c = combine_scores([a])
        assert (c.rmv, c.mad, c.bias) == (2.0, 1.5, -0.25)
        cc = combine_scores([a, a, a])
        assert cc.rmv == pytest.approx(2.0)
        assert (cc.mad, cc.bias) == (1.5, -0.25)

    def test_matches_pooled_recomputation(self):
        rng = np.random.default_rng(4)
        truth = rng.uniform(-60, 0, size=(2, N_BINS, 4))
        sims = [truth[None] + rng.normal(0, 2, size=(3, 2, N_BINS, 4)) for _ in range(10)]
        combined = combine_scores([trajectory_score(s, truth) for s in sims])
        pooled = trajectory_score(np.concatenate(sims), truth)
        assert combined.rmv == pytest.approx(pooled.rmv, abs=1e-9)
        assert combined.mad == pytest.approx(pooled.mad, abs=1e-9)
        assert combined.bias == pytest.approx(pooled.bias, abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            combine_scores([])


class TestIntensityScore:
    def test_symmetric_errors(self):
        s = intensity_score([50.0, 60.0], [55.0, 55.0])
        assert (s.bias, s.mae, s.rmse, s.n) == (0.0, 5.0, 5.0, 2)

    def test_perfect(self):
        s = intensity_score([40.0, 70.0], [40.0, 70.0])
        assert (s.rmse, s.mae, s.bias) == (0.0, 0.0, 0.0)

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(5)
        pred = rng.uniform(20, 140, size=100)
        truth = rng.uniform(20, 140, size=100)
        s = intensity_score(pred, truth)
        err = [p - t for p, t in zip(pred, truth)]
        assert s.rmse == pytest.approx(math.sqrt(sum(e * e for e in err) / 100), abs=1e-12)
        assert s.mae == pytest.approx(sum(abs(e) for e in err) / 100, abs=1e-12)
        assert s.bias == pytest.approx(sum(err) / 100, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            intensity_score([1.0], [1.0, 2.0])

    @given(
        st.lists(
            st.tuples(
                st.floats(0, 200, allow_nan=False), st.floats(0, 200, allow_nan=False)
            ),
            min_size=1,
            max_size=40,
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_metric_ordering_invariant(self, pairs):
        pred, truth = zip(*pairs)
        s = intensity_score(list(pred), list(truth))
        assert s.rmse >= s.mae >= 0.0
        assert s.rmse >= abs(s.bias) - 1e-12


class TestBinning:
    def rec(self, **kw):
        base = dict(truth=50.0, prediction=55.0, prior_change_6h=0.0,
                    shear_magnitude=5.0, shear_direction=45.0)
        base.update(kw)
        return VerificationRecord(**base)

    def test_maintenance_boundary_inclusive(self):
        tables = binned_verification([self.rec(prior_change_6h=5.0)])
        assert tables["evolution"]["maintenance"].n == 1
        tables = binned_verification([self.rec(prior_change_6h=-5.0)])
        assert tables["evolution"]["maintenance"].n == 1
        tables = binned_verification([self.rec(prior_change_6h=5.1)])
        assert tables["evolution"]["intensifying"].n == 1

    def test_shear_lower_bound_inclusive(self):
        tables = binned_verification([self.rec(shear_magnitude=10.0)])
        assert tables["shear_magnitude"]["10-20kt"].n == 1

    def test_direction_quadrants(self):
        assert shear_direction_quadrant(0.0) == "NE"
        assert shear_direction_quadrant(89.9) == "NE"
        assert shear_direction_quadrant(90.0) == "SE"
        assert shear_direction_quadrant(225.0) == "SW"
        assert shear_direction_quadrant(359.9) == "NW"

    def test_category_thresholds(self):
        for truth, cat in [(33.9, "TD"), (34.0, "TS"), (63.9, "TS"), (64.0, "HU"),
                           (95.9, "HU"), (96.0, "MH")]:
            tables = binned_verification([self.rec(truth=truth)])
            assert tables["category"][cat].n == 1, (truth, cat)

    def test_counts_match_enumeration_oracle(self):
        rng = np.random.default_rng(6)
        records = []
        for _ in range(200):
            records.append(
                self.rec(
                    truth=float(rng.uniform(20, 140)),
                    prior_change_6h=float(rng.uniform(-15, 15)),
                    shear_magnitude=float(rng.uniform(0, 35)),
                    shear_direction=float(rng.uniform(0, 360)),
                )
            )
        tables = binned_verification(records)
        # independent enumeration
        mag_counts = {"0-10kt": 0, "10-20kt": 0, "20+kt": 0}
        for r in records:
            if r.shear_magnitude < 10:
                mag_counts["0-10kt"] += 1
            elif r.shear_magnitude < 20:
                mag_counts["10-20kt"] += 1
            else:
                mag_counts["20+kt"] += 1
        for label, n in mag_counts.items():
            if n:
                assert tables["shear_magnitude"][label].n == n
        for table in tables.values():
            assert sum(s.n for label, s in table.items() if label != "total") == 200
            assert table["total"].n == 200

    def test_missing_keys_routed_to_unbinned(self):
        tables = binned_verification([self.rec(shear_magnitude=None, shear_direction=None,
                                               prior_change_6h=None)])
        assert tables["shear_magnitude"][verify.UNBINNED].n == 1
        assert tables["shear_direction"][verify.UNBINNED].n == 1
        assert tables["evolution"][verify.UNBINNED].n == 1


class TestBaselines:
    def test_frozen_rows_identical_across_leads(self):
        rng = np.random.default_rng(7)
        obs = StructuralTrajectory(
            rows=rng.uniform(-60, 0, size=(13, N_BINS, 4)),
            n_observed=13, n_simulated=0, anchor_time=T0,
        )
        frozen = persistence_trajectory_baseline(obs, steps=6)
        assert frozen.n_simulated == 6
        for j in range(6):
            assert np.array_equal(frozen.rows[13 + j], obs.rows[12])

    def test_constant_truth_scores_zero(self):
        obs = StructuralTrajectory(
            rows=np.full((13, N_BINS, 4), -45.0), n_observed=13, n_simulated=0, anchor_time=T0
        )
        frozen = persistence_trajectory_baseline(obs, steps=1)
        truth = np.full((1, N_BINS, 4), -45.0)
        s = trajectory_score([frozen], truth)
        assert s.per_lead[2] == (0.0, 0.0, 0.0)

    def test_baseline_bias_matches_direct_computation(self):
        rng = np.random.default_rng(8)
        obs = StructuralTrajectory(
            rows=rng.uniform(-60, 0, size=(13, N_BINS, 4)),
            n_observed=13, n_simulated=0, anchor_time=T0,
        )
        truth = rng.uniform(-60, 0, size=(3, N_BINS, 4))
        frozen = persistence_trajectory_baseline(obs, steps=3)
        s = trajectory_score([frozen], truth)
        for j, lead in enumerate((2, 4, 6)):
            expected = float(np.mean(obs.rows[12] - truth[j]))
            assert s.per_lead[lead][2] == pytest.approx(expected, abs=1e-9)

    def test_intensity_persistence(self):
        series = {T0: 50.0, T0 + timedelta(hours=6): 60.0}
        assert intensity_persistence_baseline(series, T0, 6) == 50.0
        with pytest.raises(ValueError):
            intensity_persistence_baseline(series, T0 + timedelta(hours=12), 6)


class TestTableOutput:
    def test_formats_and_csv(self, tmp_path):
        records = [
            VerificationRecord(truth=50.0, prediction=53.0, prior_change_6h=2.0,
                               shear_magnitude=12.0, shear_direction=100.0),
            VerificationRecord(truth=70.0, prediction=66.0, prior_change_6h=-8.0,
                               shear_magnitude=3.0, shear_direction=300.0),
        ]
        tables = binned_verification(records)
        text = verify.format_tables(tables)
        assert "shear_magnitude" in text and "total" in text
        path = tmp_path / "tables.csv"
        verify.write_tables_csv(tables, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "table,bin,rmse_kt,mae_kt,bias_kt,n"
        assert len(lines) > 8
