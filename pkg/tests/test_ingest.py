import textwrap
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from cycast import ingest
from cycast.ingest import (
    BrightnessStamp,
    ParseError,
    ShipsConfig,
    Source,
    Status,
    TrackPoint,
)

UTC = timezone.utc

HURDAT2_FIXTURE = textwrap.dedent("""\
    AL052019,              DORIAN,      3,
    20190901, 1200,  , HU, 26.5N, 76.5W, 150, 945,
    20190901, 1800,  , HU, 26.6N, 77.0W, 160, 927,
    20190902, 0000, L, HU, 26.6N, 77.7W, 155, 914,
    AL062019,               FAKEY,      2,
    20190910, 0000,  , TS, 15.0N, 45.0W,  45, -999,
    20190910, 0600,  , TS, 15.5N, 45.5W,  50, 1001,
    """)


class TestHurdat2:
    def test_hand_transcribed_fixture(self):
        storms = ingest.parse_hurdat2(HURDAT2_FIXTURE)
        assert len(storms) == 2
        header, points = storms[0]
        assert header.storm_id == "AL052019"
        assert header.name == "DORIAN"
        assert header.n_records == 3
        p = points[1]
        assert p == TrackPoint(
            storm_id="AL052019",
            time=datetime(2019, 9, 1, 18, tzinfo=UTC),
            lat=26.6,
            lon=-77.0,
            vmax=160,
            status=Status.HU,
            source=Source.BEST_TRACK,
        )
        # second storm: missing pressure is fine, vmax parsed
        assert storms[1][1][0].vmax == 45

    def test_empty_body_after_header(self):
        storms = ingest.parse_hurdat2("AL052019, DORIAN, 0,\n")
        assert storms == [(ingest.StormHeader("AL052019", "DORIAN", 0), [])]

    def test_bad_longitude_suffix_names_field_and_line(self):
        text = "AL052019, DORIAN, 1,\n20190901, 1800,  , HU, 26.6N, 77.0Q, 160, 927,\n"
        with pytest.raises(ParseError) as err:
            ingest.parse_hurdat2(text)
        assert err.value.line_number == 2
        assert err.value.field_name == "lon"

    def test_count_mismatch_warns_but_parses(self, caplog):
        text = "AL052019, DORIAN, 5,\n20190901, 1800,  , HU, 26.6N, 77.0W, 160, 927,\n"
        with caplog.at_level("WARNING"):
            storms = ingest.parse_hurdat2(text)
        assert len(storms[0][1]) == 1
        assert any("declares 5" in r.message for r in caplog.records)

    def test_missing_vmax_becomes_none(self):
        text = "AL052019, DORIAN, 1,\n20190901, 1800,  , HU, 26.6N, 77.0W, -999, 927,\n"
        assert ingest.parse_hurdat2(text)[0][1][0].vmax is None

    def test_southern_western_hemispheres(self):
        text = "SH052019, ODDBALL, 1,\n20190901, 1800,  , TS, 12.0S, 110.0E, 40, 990,\n"
        p = ingest.parse_hurdat2(text)[0][1][0]
        assert (p.lat, p.lon) == (-12.0, 110.0)

    def test_round_trip_through_writer(self):
        storms = ingest.parse_hurdat2(HURDAT2_FIXTURE)
        again = ingest.parse_hurdat2(ingest.format_hurdat2(storms))
        assert [pts for _, pts in again] == [pts for _, pts in storms]


ADECK_FIXTURE = textwrap.dedent("""\
    AL, 05, 2019090112,   , CARQ, -24, 265N,  765W,  140, 9999, HU,
    AL, 05, 2019090118,   , CARQ,   0, 266N,  770W,  145, 9999, HU,
    AL, 05, 2019090118,   , OFCL,   0, 266N,  770W,  150, 9999, HU,
    AL, 05, 2019090200,   , CARQ,   0, 266N,  777W,  150, 9999, HU,
    """)


class TestAdeckCarq:
    def test_keeps_only_carq_tau0(self):
        points = ingest.parse_adeck_carq(ADECK_FIXTURE)
        assert len(points) == 2
        p = points[0]
        assert p.storm_id == "AL052019"
        assert p.time == datetime(2019, 9, 1, 18, tzinfo=UTC)
        assert (p.lat, p.lon, p.vmax) == (26.6, -77.0, 145)
        assert p.source is Source.OPERATIONAL

    def test_non_carq_only_gives_empty(self):
        text = "AL, 05, 2019090118,   , OFCL,   0, 266N,  770W,  150, 9999, HU,\n"
        assert ingest.parse_adeck_carq(text) == []

    def test_duplicate_rows_last_wins(self):
        text = (
            "AL, 05, 2019090118,   , CARQ,   0, 266N,  770W,   50, 9999, TS,\n"
            "AL, 05, 2019090118,   , CARQ,   0, 266N,  770W,   55, 9999, TS,\n"
        )
        points = ingest.parse_adeck_carq(text)
        assert len(points) == 1
        assert points[0].vmax == 55

    def test_non_integer_vmax_errors(self):
        text = "AL, 05, 2019090118,   , CARQ,   0, 266N,  770W,   xx, 9999, TS,\n"
        with pytest.raises(ParseError) as err:
            ingest.parse_adeck_carq(text)
        assert err.value.field_name == "VMAX"

    def test_round_trip_through_writer(self):
        points = ingest.parse_adeck_carq(ADECK_FIXTURE)
        again = ingest.parse_adeck_carq(ingest.format_adeck_carq(points))
        assert again == points


SHIPS_FIXTURE = textwrap.dedent("""\
    AL052019 DORIAN 190901 18 HEAD
      -12    -6     0     6    12 TIME
     9999   140   150   160  9999 SHRD
     9999    45    60    80  9999 SHTD
    AL052019 DORIAN 190902 00 HEAD
      -12    -6     0     6    12 TIME
     9999   100  9999   120  9999 SHRD
    AL062019 FAKEY 190910 00 HEAD
      -12    -6     0     6    12 TIME
     9999   100   110   120  9999 NOPE
    """)


class TestShips:
    def test_fixture_with_scale(self):
        records = ingest.parse_ships_shear(SHIPS_FIXTURE)
        assert len(records) == 1
        r = records[0]
        assert r.storm_id == "AL052019"
        assert r.time == datetime(2019, 9, 1, 18, tzinfo=UTC)
        assert r.magnitude == pytest.approx(15.0)
        assert r.direction == pytest.approx(60.0)

    def test_sentinel_drops_record_and_missing_var_warns(self, caplog):
        with caplog.at_level("WARNING"):
            records = ingest.parse_ships_shear(SHIPS_FIXTURE)
        # block 2 has the sentinel at TIME=0, block 3 lacks SHRD entirely
        assert len(records) == 1
        assert sum("missing" in r.message for r in caplog.records) == 1
        assert sum("no SHRD row" in r.message for r in caplog.records) == 1

    def test_configurable_variable_name(self):
        cfg = ShipsConfig(magnitude_var="NOPE", magnitude_scale=1.0, direction_var=None)
        records = ingest.parse_ships_shear(SHIPS_FIXTURE, cfg)
        assert len(records) == 1
        assert records[0].storm_id == "AL062019"
        assert records[0].magnitude == 110.0

    def test_round_trip_through_writer(self):
        records = ingest.parse_ships_shear(SHIPS_FIXTURE)
        again = ingest.parse_ships_shear(ingest.format_ships(records))
        assert [(r.storm_id, r.time, r.magnitude, r.direction) for r in again] == [
            (r.storm_id, r.time, r.magnitude, r.direction) for r in records
        ]


def _track(vmaxes, step_h=6, start=datetime(2019, 9, 1, 0, tzinfo=UTC)):
    return [
        TrackPoint(
            storm_id="AL052019",
            time=start + timedelta(hours=step_h * i),
            lat=10.0 + 0.2 * i,
            lon=-50.0 - 0.1 * i,
            vmax=v,
            status=Status.TS,
            source=Source.BEST_TRACK,
        )
        for i, v in enumerate(vmaxes)
    ]


class TestInterpolateTrack:
    def test_linear_vmax(self):
        out = ingest.interpolate_track(_track([50, 62]))
        by_time = {p.time: p for p in out}
        t0 = datetime(2019, 9, 1, 0, tzinfo=UTC)
        assert by_time[t0 + timedelta(hours=2)].vmax == pytest.approx(54.0)
        assert by_time[t0 + timedelta(hours=4)].vmax == pytest.approx(58.0)

    def test_original_points_bit_for_bit(self):
        points = _track([50.0, 62.0, 47.0])
        out = ingest.interpolate_track(points)
        by_time = {p.time: p for p in out}
        for p in points:
            assert by_time[p.time] is p

    def test_latitude_linear(self):
        points = _track([50, 50])
        points[1] = ingest.TrackPoint(
            storm_id=points[1].storm_id, time=points[1].time, lat=11.2, lon=points[1].lon,
            vmax=50, status=points[1].status, source=points[1].source,
        )
        points[0] = ingest.TrackPoint(
            storm_id=points[0].storm_id, time=points[0].time, lat=10.0, lon=points[0].lon,
            vmax=50, status=points[0].status, source=points[0].source,
        )
        out = ingest.interpolate_track(points)
        p2 = [p for p in out if p.time.hour == 2][0]
        assert p2.lat == pytest.approx(10.4)
        assert p2.source is Source.INTERPOLATED

    def test_affine_series_recovered_exactly(self):
        # vmax affine in time: every interpolated value matches the formula
        points = _track([40 + 3 * i for i in range(5)])
        out = ingest.interpolate_track(points)
        t0 = points[0].time
        for p in out:
            hours = (p.time - t0).total_seconds() / 3600
            assert abs(p.vmax - (40 + 0.5 * hours)) <= 1e-9

    def test_single_point_errors(self):
        with pytest.raises(ValueError, match="cannot interpolate"):
            ingest.interpolate_track(_track([50]))

    def test_non_monotone_times_error(self):
        points = _track([50, 60])
        with pytest.raises(ValueError):
            ingest.interpolate_track(points + [points[0]])


class TestLifetimeFilter:
    def test_trims_to_threshold_span(self):
        points = _track([30, 35, 30, 40, 30])
        kept = ingest.lifetime_filter(points)
        assert [p.vmax for p in kept] == [35, 30, 40]

    def test_all_above_is_identity(self):
        points = _track([40, 50, 60])
        assert ingest.lifetime_filter(points) == points

    def test_all_below_is_empty(self):
        assert ingest.lifetime_filter(_track([10, 20, 30])) == []

    def test_idempotent(self):
        points = _track([30, 35, 30, 40, 30])
        once = ingest.lifetime_filter(points)
        assert ingest.lifetime_filter(once) == once


class TestStampStore:
    def _stamp(self, grid, **kw):
        return BrightnessStamp(
            storm_id="AL052019",
            time=datetime(2019, 9, 1, 18, tzinfo=UTC),
            grid=grid,
            **kw,
        )

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        grid = rng.uniform(-100, 50, size=(501, 501)).astype(np.float32)
        grid[10, 10] = np.nan
        grid[400, 123] = np.nan
        stamp = self._stamp(grid)
        path = tmp_path / "a.stamp"
        ingest.store_stamp(stamp, path)
        back = ingest.load_stamp(path)
        assert back.storm_id == stamp.storm_id
        assert back.time == stamp.time
        assert back.pixel_km == stamp.pixel_km
        assert back.center_index == stamp.center_index
        assert np.array_equal(back.grid, stamp.grid, equal_nan=True)
        assert back.grid.tobytes() == stamp.grid.tobytes()

    def test_size_mismatch_errors(self, tmp_path):
        stamp = self._stamp(np.zeros((8, 8), dtype=np.float32))
        path = tmp_path / "b.stamp"
        ingest.store_stamp(stamp, path)
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="payload"):
            ingest.load_stamp(path)

    def test_unknown_units_tag_errors(self, tmp_path):
        stamp = self._stamp(np.zeros((4, 4), dtype=np.float32))
        path = tmp_path / "c.stamp"
        ingest.store_stamp(stamp, path)
        hdr = tmp_path / "c.stamp.hdr"
        hdr.write_text(hdr.read_text().replace("degC", "degF"))
        with pytest.raises(ValueError, match="units"):
            ingest.load_stamp(path)

    def test_kelvin_payload_converted(self, tmp_path):
        # 213.15 K is -60 degC; Kelvin files convert at load time
        stamp = self._stamp(np.zeros((4, 4), dtype=np.float32))
        path = tmp_path / "d.stamp"
        ingest.store_stamp(stamp, path)
        with open(path, "wb") as fh:
            fh.write(np.full((4, 4), 213.15, dtype="<f4").tobytes())
        hdr = tmp_path / "d.stamp.hdr"
        hdr.write_text(hdr.read_text().replace("degC", "K"))
        back = ingest.load_stamp(path)
        assert np.allclose(back.grid, -60.0, atol=1e-4)
