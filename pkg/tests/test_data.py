import warnings
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wavecast import data as dp
from wavecast.errors import (
    ArgumentError,
    DataError,
    InsufficientDataError,
    ParseError,
    UndefinedCIFError,
)

T0 = datetime(2022, 11, 13, tzinfo=timezone.utc)


def write_rows(path, rows, header="timestamp,cif,gld,reg,neg,temperature"):
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def hourly_rows(n, skip=()):
    rows = []
    for i in range(n):
        if i in skip:
            continue
        ts = (T0 + timedelta(hours=i)).isoformat()
        rows.append(f"{ts},{400 + i},{6000 + i},{1000 + 2 * i},{5000 - i},{20 + 0.5 * i}")
    return rows


class TestComputeCif:
    def test_single_source(self):
        assert dp.compute_cif(dp.GenerationMix([12.0], [820.0])) == 820.0

    def test_half_half(self):
        assert dp.compute_cif(dp.GenerationMix([50.0, 50.0], [1000.0, 0.0])) == pytest.approx(500.0)

    def test_zero_generation(self):
        with pytest.raises(UndefinedCIFError):
            dp.compute_cif(dp.GenerationMix([0.0, 0.0], [30.0, 820.0]))

    @given(st.lists(st.floats(0.1, 1e4), min_size=1, max_size=6), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, energy, lam):
        rates = np.linspace(0.0, 900.0, len(energy))
        base = dp.compute_cif(dp.GenerationMix(energy, rates))
        scaled = dp.compute_cif(dp.GenerationMix([lam * e for e in energy], rates))
        assert scaled == pytest.approx(base, rel=1e-12, abs=1e-9)


class TestLoadCsv:
    def test_well_formed(self, tmp_path):
        recs = dp.load_csv(write_rows(tmp_path / "a.csv", hourly_rows(48)))
        assert len(recs) == 48
        assert not any(r.interpolated for r in recs)
        assert recs[5].reg == 1010.0 and recs[5].timestamp == T0 + timedelta(hours=5)

    def test_single_gap_interpolated(self, tmp_path):
        recs = dp.load_csv(write_rows(tmp_path / "a.csv", hourly_rows(48, skip={20})))
        assert len(recs) == 48
        filled = recs[20]
        assert filled.interpolated and filled.timestamp == T0 + timedelta(hours=20)
        assert filled.gld == pytest.approx(0.5 * (recs[19].gld + recs[21].gld))
        assert filled.cif == pytest.approx(420.0)
        assert filled.temperature == pytest.approx(30.0)

    def test_long_gap_rejected(self, tmp_path):
        with pytest.raises(DataError):
            dp.load_csv(write_rows(tmp_path / "a.csv", hourly_rows(48, skip={20, 21})))

    def test_duplicate(self, tmp_path):
        rows = hourly_rows(10)
        rows.insert(4, rows[3])
        with pytest.raises(DataError, match="duplicate"):
            dp.load_csv(write_rows(tmp_path / "a.csv", rows))

    def test_out_of_order(self, tmp_path):
        rows = hourly_rows(10)
        rows[3], rows[4] = rows[4], rows[3]
        with pytest.raises(DataError):
            dp.load_csv(write_rows(tmp_path / "a.csv", rows))

    def test_malformed_row_line_number(self, tmp_path):
        rows = hourly_rows(10)
        rows[6] = rows[6].replace(",6006,", ",six,")
        with pytest.raises(ParseError) as info:
            dp.load_csv(write_rows(tmp_path / "a.csv", rows))
        assert info.value.line == 8  # header is line 1

    def test_wrong_field_count(self, tmp_path):
        rows = hourly_rows(4)
        rows[2] += ",9"
        with pytest.raises(ParseError, match="line 4"):
            dp.load_csv(write_rows(tmp_path / "a.csv", rows))

    def test_bad_header(self, tmp_path):
        with pytest.raises(ParseError):
            dp.load_csv(write_rows(tmp_path / "a.csv", hourly_rows(3), header="time,cif,gld,reg,neg,temp"))

    def test_negative_generation(self, tmp_path):
        rows = hourly_rows(3)
        rows[1] = rows[1].replace(",1002,", ",-1002,")
        with pytest.raises(ParseError):
            dp.load_csv(write_rows(tmp_path / "a.csv", rows))

    def test_mix_file_supplies_cif(self, tmp_path):
        main = tmp_path / "grid.csv"
        rows = [r.split(",", 2) for r in hourly_rows(3)]
        main.write_text("timestamp,gld,reg,neg,temperature\n"
                        + "".join(f"{a},{c}\n" for a, _, c in rows), encoding="utf-8")
        mix = tmp_path / "mix.csv"
        lines = ["timestamp,source,energy_mwh,emission_rate"]
        for i in range(3):
            ts = (T0 + timedelta(hours=i)).isoformat()
            lines += [f"{ts},solar,{50 + i},0", f"{ts},coal,50,1000"]
        mix.write_text("\n".join(lines) + "\n", encoding="utf-8")
        recs = dp.load_csv(main, mix_path=mix)
        assert recs[0].cif == pytest.approx(500.0)
        assert recs[2].cif == pytest.approx(50000 / 102)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            dp.load_csv(tmp_path / "nope.csv")

    def test_synthetic_round_trip(self, tmp_path):
        recs = dp.synthesize_grid(dp.SynthConfig(days=3, seed=1))
        path = dp.write_csv(recs, tmp_path / "s.csv", comment="days=3\nseed=1")
        again = dp.load_csv(path)
        np.testing.assert_array_equal(dp.records_to_array(again), dp.records_to_array(recs))
        assert [r.timestamp for r in again] == [r.timestamp for r in recs]


class TestWindows:
    def test_four_years(self):
        arr = np.zeros((1461 * 24, 5))
        assert len(arr) == 35064
        assert len(dp.make_windows(arr, 24, 24, 1)) == 35017

    def test_exact_length(self):
        assert len(dp.make_windows(np.zeros((48, 5)), 24, 24, 1)) == 1

    def test_stride(self):
        assert len(dp.make_windows(np.zeros((100, 5)), 24, 24, 10)) == 6

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            dp.make_windows(np.zeros((47, 5)), 24, 24, 1)

    def test_contents(self):
        arr = np.arange(60 * 5, dtype=float).reshape(60, 5)
        ds = dp.make_windows(arr, 6, 4, 3)
        np.testing.assert_array_equal(ds.X[2], arr[6:12])
        np.testing.assert_array_equal(ds.e[2], arr[12:16, 0])
        assert ds.starts[2] == 6

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 12), st.integers(0, 200))
    @settings(max_examples=200, deadline=None)
    def test_count_formula(self, T, S, stride, extra):
        length = T + S + extra
        ds = dp.make_windows(np.zeros((length, 5)), T, S, stride)
        assert len(ds) == (length - (T + S)) // stride + 1
        # the last window still fits
        assert ds.starts[-1] + T + S <= length


class TestNormalization:
    def test_round_trip_and_moments(self):
        x = np.random.default_rng(0).normal(3.0, 5.0, size=(40, 24, 5))
        stats = dp.fit_normalization(x)
        z = stats.apply(x)
        flat = z.reshape(-1, 5)
        assert np.all(np.abs(flat.mean(axis=0)) < 1e-10)
        np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-10)
        np.testing.assert_allclose(stats.invert(z), x, atol=1e-10)
        e = x[:, :, 0]
        np.testing.assert_allclose(stats.invert_target(stats.apply_target(e)), e, atol=1e-10)

    def test_constant_variable(self):
        x = np.random.default_rng(1).normal(size=(10, 4, 3))
        x[..., 1] = 7.0
        with pytest.warns(RuntimeWarning):
            stats = dp.fit_normalization(x)
        z = stats.apply(x)
        assert np.all(z[..., 1] == 0.0) and np.all(np.isfinite(z))

    def test_empty(self):
        with pytest.raises(ArgumentError):
            dp.fit_normalization(np.zeros((0, 24, 5)))

    def test_dict_round_trip(self):
        stats = dp.fit_normalization(np.random.default_rng(2).normal(size=(5, 3)))
        again = dp.NormStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.mean, stats.mean)
        np.testing.assert_array_equal(again.std, stats.std)


class TestFolds:
    def test_blocks_of_two(self):
        split = dp.kfold_split(10, 5)
        assert split.folds.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]

    def test_four_year_fold_sizes(self):
        assert dp.kfold_split(35017, 5).sizes().tolist() == [7004, 7004, 7003, 7003, 7003]

    def test_too_many_folds(self):
        with pytest.raises(ArgumentError):
            dp.kfold_split(3, 5)

    @pytest.mark.parametrize("n", [120, 173, 250])
    def test_purge_prevents_leakage(self, n):
        T = S = 24
        split = dp.kfold_split(n, 5, purge_gap=T + S - 1)
        for fold in range(5):
            test = split.test_indices(fold)
            train = split.train_indices(fold)
            target_hours = set()
            for s in test:
                target_hours.update(range(s + T, s + T + S))
            input_hours = set()
            for s in train:
                input_hours.update(range(s, s + T))
            assert not input_hours & target_hours
            assert not set(train) & set(test)

    def test_without_purge_leaks(self):
        split = dp.kfold_split(120, 5, purge_gap=0)
        test = split.test_indices(2)
        train = split.train_indices(2)
        later = train[train > test[-1]]
        assert later[0] < test[-1] + 24 + 24  # overlapping windows remain

    @given(st.integers(5, 400), st.integers(1, 5))
    def test_contiguous_disjoint_cover(self, n, k):
        split = dp.kfold_split(n, k)
        assert len(split.folds) == n
        assert np.all(np.diff(split.folds) >= 0)
        sizes = split.sizes()
        assert sizes.sum() == n and sizes.max() - sizes.min() <= 1


class TestSynth:
    def test_no_renewables_is_all_fossil(self):
        recs = dp.synthesize_grid(dp.SynthConfig(days=3, noise=0.0, penetration=0.0))
        cif = dp.records_to_array(recs)[:, 0]
        np.testing.assert_allclose(cif, 820.0, rtol=1e-12)

    def test_renewables_cover_load(self):
        # zero floor and enough renewables to exceed load at noon
        recs = dp.synthesize_grid(dp.SynthConfig(days=4, noise=0.0, penetration=3.0, floor=0.0))
        arr = dp.records_to_array(recs)
        covered = arr[:, 2] >= arr[:, 1]
        assert covered.any()
        np.testing.assert_allclose(arr[covered, 0], 30.0, rtol=1e-12)
        assert np.all(arr[covered, 3] == 0.0)

    def test_deterministic(self):
        a = dp.records_to_array(dp.synthesize_grid(dp.SynthConfig(days=10, seed=3)))
        b = dp.records_to_array(dp.synthesize_grid(dp.SynthConfig(days=10, seed=3)))
        c = dp.records_to_array(dp.synthesize_grid(dp.SynthConfig(days=10, seed=4)))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @pytest.mark.parametrize("seed", range(4))
    def test_cif_bounds_and_schema(self, seed):
        recs = dp.synthesize_grid(dp.SynthConfig(days=30, seed=seed))
        arr = dp.records_to_array(recs)
        assert len(recs) == 720
        assert np.all((arr[:, 0] >= 30.0) & (arr[:, 0] <= 820.0))
        assert np.all(arr[:, 1:4] >= 0.0)
        steps = {b.timestamp - a.timestamp for a, b in zip(recs, recs[1:])}
        assert steps == {timedelta(hours=1)}

    def test_event_curtails_reg(self):
        ev = dp.CurtailmentEvent(100, 110, 0.9)
        base = dp.records_to_array(dp.synthesize_grid(dp.SynthConfig(days=10)))
        hit = dp.records_to_array(dp.synthesize_grid(dp.SynthConfig(days=10, events=[ev])))
        np.testing.assert_allclose(hit[100:110, 2], 0.1 * base[100:110, 2])
        np.testing.assert_array_equal(hit[:100], base[:100])
        assert np.all(hit[100:110, 3] >= base[100:110, 3])
        assert np.all(hit[100:110, 0] >= base[100:110, 0])

    @pytest.mark.parametrize("ev", [dp.CurtailmentEvent(10, 5), dp.CurtailmentEvent(-1, 5),
                                    dp.CurtailmentEvent(0, 10_000), dp.CurtailmentEvent(0, 5, 1.5)])
    def test_invalid_event(self, ev):
        with pytest.raises(ArgumentError):
            dp.synthesize_grid(dp.SynthConfig(days=3, events=[ev]))

    def test_too_few_days(self):
        with pytest.raises(ArgumentError):
            dp.synthesize_grid(dp.SynthConfig(days=1))

    def test_no_spurious_warnings(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            dp.synthesize_grid(dp.SynthConfig(days=5))
