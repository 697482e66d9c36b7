import numpy as np
import pytest

from pfrp.config import SplitSpec
from pfrp.errors import DataError, ShapeError
from pfrp.series import (
    IndexRange,
    TimeSeries,
    chronological_split,
    fit_standardizer,
    load_csv,
    mae,
    make_windows,
    mse,
    prepare_series,
    window_count,
)


@pytest.fixture
def three_column_csv(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n2020-01-03,5,6\n")
    return path


class TestLoadCsv:
    def test_default_column_is_last_numeric(self, three_column_csv):
        ts = load_csv(three_column_csv)
        np.testing.assert_array_equal(ts.values, [2.0, 4.0, 6.0])

    def test_named_column(self, three_column_csv):
        np.testing.assert_array_equal(load_csv(three_column_csv, column="a").values, [1.0, 3.0, 5.0])

    def test_column_index(self, three_column_csv):
        np.testing.assert_array_equal(load_csv(three_column_csv, column=1).values, [1.0, 3.0, 5.0])

    def test_headerless_file(self, tmp_path):
        path = tmp_path / "plain.csv"
        path.write_text("1.5\n2.5\n3.5\n")
        np.testing.assert_array_equal(load_csv(path).values, [1.5, 2.5, 3.5])

    def test_nan_reports_row(self, tmp_path):
        path = tmp_path / "nan.csv"
        path.write_text("a\n1\nNaN\n3\n")
        with pytest.raises(DataError, match="row 3"):
            load_csv(path)

    def test_bad_cell_in_default_column_reports_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n3,oops\n5,6\n")
        with pytest.raises(DataError, match="row 3"):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "absent.csv")

    def test_unknown_column(self, three_column_csv):
        with pytest.raises(DataError):
            load_csv(three_column_csv, column="zzz")


class TestTimeSeries:
    def test_rejects_short_series(self):
        with pytest.raises(DataError):
            TimeSeries(np.array([1.0]))

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            TimeSeries(np.array([1.0, np.inf]))

    def test_values_are_read_only(self):
        ts = TimeSeries(np.arange(5.0))
        with pytest.raises(ValueError):
            ts.values[0] = 3.0


class TestSplit:
    def test_seven_one_two(self):
        ranges = chronological_split(TimeSeries(np.arange(100.0)), SplitSpec(train_ratio=0.7, val_ratio=0.1, test_ratio=0.2))
        assert ranges == (IndexRange(0, 70), IndexRange(70, 80), IndexRange(80, 100))

    def test_six_two_two(self):
        ranges = chronological_split(TimeSeries(np.arange(10.0)), SplitSpec(train_ratio=0.6, val_ratio=0.2, test_ratio=0.2))
        assert ranges == (IndexRange(0, 6), IndexRange(6, 8), IndexRange(8, 10))

    def test_ratio_outside_open_interval(self):
        with pytest.raises(ValueError):
            SplitSpec(train_ratio=0.5, val_ratio=0.5, test_ratio=0.0)

    def test_split_too_small(self):
        with pytest.raises(DataError):
            chronological_split(TimeSeries(np.arange(10.0)), SplitSpec(), min_length=5)

    def test_ranges_are_disjoint_and_exhaustive(self):
        ts = TimeSeries(np.arange(1234.0))
        train, val, test = chronological_split(ts, SplitSpec())
        assert train.start == 0 and train.stop == val.start and val.stop == test.start and test.stop == 1234

    def test_per_split_minimums(self):
        ts = TimeSeries(np.arange(100.0))
        chronological_split(ts, SplitSpec(), min_length=(70, 10, 20))
        with pytest.raises(DataError, match="val split"):
            chronological_split(ts, SplitSpec(), min_length=(70, 11, 20))

    def test_long_train_horizon_only_constrains_train(self):
        ts = TimeSeries(np.sin(np.arange(3000) / 10.0))
        prepared = prepare_series(ts, SplitSpec(), lookback=96, horizon=96, train_horizon=720)
        assert len(prepared.val) == 300
        windows = prepared.windows("train", 96, 720)
        assert len(windows) == 2100 - 96 - 720 + 1
        assert windows[0].y.size == 720
        with pytest.raises(DataError, match="val split"):
            prepare_series(ts, SplitSpec(), lookback=96, horizon=720)


class TestWindows:
    def test_counts(self):
        values = np.arange(300.0)
        assert len(make_windows(values, IndexRange(0, 200), 96, 96)) == 9
        assert len(make_windows(values, IndexRange(0, 192), 96, 96)) == 1
        with pytest.raises(DataError):
            make_windows(values, IndexRange(0, 191), 96, 96)

    def test_count_formula_property(self):
        rng = np.random.default_rng(3)
        values = np.arange(400.0)
        for _ in range(50):
            L, H, stride = (int(v) for v in rng.integers(1, 30, size=3))
            length = int(rng.integers(L + H, 400))
            windows = make_windows(values, IndexRange(0, length), L, H, stride)
            assert len(windows) == window_count(length, L, H, stride) == (length - L - H) // stride + 1

    def test_window_layout(self):
        values = np.arange(50.0)
        windows = make_windows(values, IndexRange(10, 40), 5, 3, stride=2)
        for i, w in enumerate(windows):
            assert w.start_index == 10 + 2 * i
            np.testing.assert_array_equal(w.x, values[w.start_index:w.start_index + 5])
            np.testing.assert_array_equal(w.y, values[w.start_index + 5:w.start_index + 8])
            assert w.start_index + 8 <= 40


class TestStandardizer:
    def test_population_std(self):
        s = fit_standardizer([1.0, 3.0])
        assert s.mean == 2.0 and s.std == 1.0
        np.testing.assert_array_equal(s.apply([1.0, 3.0]), [-1.0, 1.0])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        s = fit_standardizer(rng.normal(5.0, 3.0, size=100))
        v = rng.normal(size=50)
        np.testing.assert_allclose(s.invert(s.apply(v)), v, atol=1e-9)

    def test_constant_train(self):
        with pytest.raises(DataError):
            fit_standardizer([5.0, 5.0, 5.0])

    def test_fit_uses_train_only(self):
        values = np.concatenate([np.random.default_rng(0).normal(size=70), np.full(30, 1000.0)])
        prepared = prepare_series(TimeSeries(values), SplitSpec(), lookback=5, horizon=5)
        train = prepared.standardized[:70]
        assert abs(train.mean()) < 1e-9
        assert abs(train.std() - 1.0) < 1e-9


class TestMetrics:
    def test_identity(self):
        a = np.array([1.0, 2.0, 3.0])
        assert mse(a, a) == 0.0 and mae(a, a) == 0.0

    def test_hand_values(self):
        assert mse([0.0, 0.0], [1.0, 3.0]) == 5.0
        assert mae([0.0, 0.0], [1.0, 3.0]) == 2.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            mse([1.0], [1.0, 2.0])

    def test_jensen(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=(2, 30))
            assert mae(a, b) ** 2 <= mse(a, b) + 1e-12
