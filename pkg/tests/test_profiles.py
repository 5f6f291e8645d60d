import math
from datetime import datetime, timedelta, timezone

import matplotlib
import numpy as np
import pytest

from cycast import profiles
from cycast.ingest import BrightnessStamp
from cycast.profiles import (
    BIN_KM,
    N_BINS,
    N_QUADRANTS,
    QUADRANT_ORDER,
    RadialProfileSet,
    StructuralTrajectory,
)

UTC = timezone.utc
T0 = datetime(2021, 8, 2, 0, tzinfo=UTC)


def make_stamp(grid, pixel_km=4.0, time=T0):
    return BrightnessStamp(storm_id="SY012021", time=time, grid=grid, pixel_km=pixel_km)


def oracle_profiles(stamp):
    """Independent per-pixel binning: loop every pixel, assign quadrant and
    bin by center distance/azimuth, average."""
    rows, cols = stamp.grid.shape
    cr, cc = stamp.center_index
    sums = np.zeros((N_QUADRANTS, N_BINS))
    counts = np.zeros((N_QUADRANTS, N_BINS), dtype=int)
    for i in range(rows):
        for j in range(cols):
            if (i, j) == (cr, cc) or not np.isfinite(stamp.grid[i, j]):
                continue
            north = (cr - i) * stamp.pixel_km
            east = (j - cc) * stamp.pixel_km
            r = math.hypot(north, east)
            if r >= N_BINS * BIN_KM:
                continue
            theta = math.degrees(math.atan2(north, east)) % 360.0
            q = int(theta // 90.0)
            k = int(r // BIN_KM)
            sums[q, k] += stamp.grid[i, j]
            counts[q, k] += 1
    with np.errstate(invalid="ignore"):
        means = sums / counts
    return means, counts


def radial_field(fn, n=205, pixel_km=4.0):
    half = n // 2
    north = (half - np.arange(n))[:, None] * pixel_km
    east = (np.arange(n) - half)[None, :] * pixel_km
    r = np.hypot(north, east)
    theta = np.degrees(np.arctan2(north, east)) % 360.0
    return fn(r, theta).astype(np.float32)


class TestComputeRadialProfiles:
    def test_uniform_stamp(self):
        stamp = make_stamp(np.full((205, 205), -60.0, dtype=np.float32))
        ps = profiles.compute_radial_profiles(stamp)
        assert np.allclose(ps.values, -60.0)
        assert ps.valid_counts.min() >= 1

    def test_step_field_matches_oracle(self):
        stamp = make_stamp(radial_field(lambda r, th: np.where(r < 100, -80.0, -20.0)))
        ps = profiles.compute_radial_profiles(stamp)
        means, counts = oracle_profiles(stamp)
        mask = counts > 0
        assert np.max(np.abs(ps.values[mask] - means[mask])) <= 1e-9
        assert np.array_equal(ps.valid_counts, counts)
        # interior bins of each regime sit at the plateau values
        assert np.allclose(ps.values[:, 5:18], -80.0)
        assert np.allclose(ps.values[:, 27:], -20.0)

    def test_hemisphere_contrast_matches_oracle(self):
        stamp = make_stamp(
            radial_field(lambda r, th: np.where((th >= 0) & (th < 90), -70.0, -30.0))
        )
        ps = profiles.compute_radial_profiles(stamp)
        means, counts = oracle_profiles(stamp)
        mask = counts > 0
        assert np.max(np.abs(ps.values[mask] - means[mask])) <= 1e-9
        assert np.allclose(ps.values[0, 1:], -70.0)   # NE
        assert np.allclose(ps.values[1:, 1:], -30.0)  # NW, SW, SE

    def test_random_stamps_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(3):
            grid = rng.uniform(-90, 20, size=(205, 205)).astype(np.float32)
            grid[rng.random(grid.shape) < 0.01] = np.nan
            stamp = make_stamp(grid)
            ps = profiles.compute_radial_profiles(stamp)
            means, counts = oracle_profiles(stamp)
            mask = counts > 0
            assert np.max(np.abs(ps.values[mask] - means[mask])) <= 1e-9
            assert np.array_equal(ps.valid_counts, counts)

    def test_quadrant_partition_exact(self):
        stamp = make_stamp(np.zeros((205, 205), dtype=np.float32))
        ps = profiles.compute_radial_profiles(stamp)
        radius, _ = profiles.pixel_polar_coords(stamp)
        inside = int(np.sum(radius < N_BINS * BIN_KM)) - 1  # center excluded
        assert int(ps.valid_counts.sum()) == inside

    def test_rotation_permutes_quadrants(self):
        rng = np.random.default_rng(3)
        grid = rng.uniform(-80, 0, size=(205, 205)).astype(np.float32)
        stamp = make_stamp(grid)
        rotated = make_stamp(np.rot90(grid).copy())
        a = profiles.compute_radial_profiles(stamp)
        b = profiles.compute_radial_profiles(rotated)
        # counterclockwise rotation: NE content lands in NW, etc.
        perm = [3, 0, 1, 2]  # rotated[NW] == original[NE] ...
        for dst, src in zip((1, 2, 3, 0), (0, 1, 2, 3)):
            assert np.allclose(b.values[dst], a.values[src], atol=1e-9), QUADRANT_ORDER[src]
        del perm

    def test_gap_filling_by_radial_interpolation(self):
        grid = radial_field(lambda r, th: -40.0 + 0.05 * r)
        # blank an annulus in one quadrant only
        stamp = make_stamp(grid)
        radius, azimuth = profiles.pixel_polar_coords(stamp)
        hole = (radius >= 200) & (radius < 210) & (azimuth < 90)
        grid2 = grid.copy()
        grid2[hole] = np.nan
        stamp2 = make_stamp(grid2)
        ps = profiles.compute_radial_profiles(stamp2)
        k = 40  # bin covering [200, 205)
        assert ps.valid_counts[0, k] == 0
        neighbors = 0.5 * (ps.values[0, k - 1] + ps.values[0, k + 1])
        assert ps.values[0, k] == pytest.approx(neighbors, abs=0.2)

    def test_small_stamp_rejected(self):
        with pytest.raises(ValueError, match="km"):
            profiles.compute_radial_profiles(make_stamp(np.zeros((51, 51), dtype=np.float32)))

    def test_empty_quadrant_rejected(self):
        grid = np.zeros((205, 205), dtype=np.float32)
        _, azimuth = profiles.pixel_polar_coords(make_stamp(grid))
        grid[(azimuth >= 0) & (azimuth < 90)] = np.nan
        with pytest.raises(ValueError, match="quadrant NE"):
            profiles.compute_radial_profiles(make_stamp(grid))


def profile_set(values, time=T0):
    return RadialProfileSet(
        values=values, valid_counts=np.ones((N_QUADRANTS, N_BINS), int), time=time
    )


def thirteen_profiles(start=T0):
    out = {}
    for h in range(13):
        t = start + timedelta(hours=2 * h)
        out[t] = profile_set(np.full((N_QUADRANTS, N_BINS), -30.0 - h), time=t)
    return out


class TestAssembleTrajectory:
    def test_constant_profiles_stack(self):
        series = {t: profile_set(np.full((4, N_BINS), -55.0), time=t) for t in thirteen_profiles()}
        anchor = max(series)
        traj = profiles.assemble_trajectory(series, anchor)
        assert traj.rows.shape == (13, N_BINS, 4)
        assert np.all(traj.rows == -55.0)
        assert traj.n_observed == 13 and traj.n_simulated == 0

    def test_missing_time_reported(self):
        series = thirteen_profiles()
        anchor = max(series)
        missing = anchor - timedelta(hours=8)
        del series[missing]
        with pytest.raises(ValueError) as err:
            profiles.assemble_trajectory(series, anchor)
        assert missing.isoformat() in str(err.value)

    def test_rows_match_direct_lookup(self):
        series = thirteen_profiles()
        anchor = max(series)
        traj = profiles.assemble_trajectory(series, anchor)
        for h in range(13):
            t = anchor - timedelta(hours=24 - 2 * h)
            expected = series[t].values.T
            assert np.array_equal(traj.rows[h], expected)
            assert traj.row_time(h) == t


class TestAzimuthalMean:
    def test_constant_quadrants(self):
        rows = np.full((13, N_BINS, 4), -40.0)
        traj = StructuralTrajectory(rows=rows, n_observed=13, n_simulated=0, anchor_time=T0)
        assert np.all(profiles.azimuthal_mean(traj) == -40.0)

    def test_known_average(self):
        rows = np.zeros((1, N_BINS, 4))
        rows[0, :, :] = [-80.0, -60.0, -40.0, -20.0]
        traj = StructuralTrajectory(rows=rows, n_observed=1, n_simulated=0, anchor_time=T0)
        assert np.allclose(profiles.azimuthal_mean(traj), -50.0)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(0)
        rows = rng.uniform(-90, 0, size=(19, N_BINS, 4))
        traj = StructuralTrajectory(rows=rows, n_observed=13, n_simulated=6, anchor_time=T0)
        got = profiles.azimuthal_mean(traj)
        for h in range(19):
            for k in range(N_BINS):
                assert got[h, k] == pytest.approx(rows[h, k].sum() / 4.0, abs=1e-12)


class TestRenderHovmoller:
    def test_observed_only_height(self, tmp_path):
        rows = np.full((13, N_BINS, 4), -40.0)
        traj = StructuralTrajectory(rows=rows, n_observed=13, n_simulated=0, anchor_time=T0)
        path = tmp_path / "h.png"
        profiles.render_hovmoller(traj, path, scale=4)
        img = matplotlib.image.imread(path)
        assert img.shape[0] == 13 * 4
        assert img.shape[1] == N_BINS * 4

    def test_rule_between_observed_and_simulated(self, tmp_path):
        rows = np.full((19, N_BINS, 4), -40.0)
        traj = StructuralTrajectory(rows=rows, n_observed=13, n_simulated=6, anchor_time=T0)
        path = tmp_path / "h.png"
        profiles.render_hovmoller(traj, path, scale=4, rule_px=2)
        img = matplotlib.image.imread(path)
        assert img.shape[0] == 19 * 4 + 2
        rule = img[13 * 4 : 13 * 4 + 2, :, :3]
        assert np.all(rule == 0.0)

    def test_colormap_lookup_oracle(self, tmp_path):
        rng = np.random.default_rng(5)
        rows = rng.uniform(-90, 30, size=(13, N_BINS, 4))
        traj = StructuralTrajectory(rows=rows, n_observed=13, n_simulated=0, anchor_time=T0)
        rgb = profiles.trajectory_to_rgb(traj.rows)
        cmap = matplotlib.colormaps[profiles.RENDER_CMAP]
        for h, k in [(0, 0), (5, 40), (12, 79)]:
            mean = rows[h, k].mean()
            norm = (mean - profiles.RENDER_VMIN) / (profiles.RENDER_VMAX - profiles.RENDER_VMIN)
            expected = np.array(cmap(norm, bytes=True)[:3])
            assert np.array_equal(rgb[h, k], expected)

    def test_unwritable_path_errors(self, tmp_path):
        rows = np.full((13, N_BINS, 4), -40.0)
        traj = StructuralTrajectory(rows=rows, n_observed=13, n_simulated=0, anchor_time=T0)
        with pytest.raises(OSError):
            profiles.render_hovmoller(traj, tmp_path / "nope" / "h.png")


class TestProfileArchive:
    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        sets = [
            RadialProfileSet(
                values=rng.uniform(-80, 0, size=(4, N_BINS)),
                valid_counts=rng.integers(0, 50, size=(4, N_BINS)),
                time=T0 + timedelta(hours=2 * i),
            )
            for i in range(3)
        ]
        path = tmp_path / "profiles.csv"
        profiles.write_profiles_csv(path, "SY012021", sets)
        back = profiles.read_profiles_csv(path)
        assert list(back) == ["SY012021"]
        for ps in sets:
            got = back["SY012021"][ps.time]
            assert np.array_equal(got.values, ps.values)
            assert np.array_equal(got.valid_counts, ps.valid_counts)

    def test_append_mode(self, tmp_path):
        ps = profile_set(np.full((4, N_BINS), -10.0))
        path = tmp_path / "profiles.csv"
        profiles.write_profiles_csv(path, "SY012021", [ps])
        ps2 = profile_set(np.full((4, N_BINS), -20.0), time=T0 + timedelta(hours=2))
        profiles.write_profiles_csv(path, "SY022021", [ps2], append=True)
        back = profiles.read_profiles_csv(path)
        assert sorted(back) == ["SY012021", "SY022021"]
