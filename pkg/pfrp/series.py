"""
Series module - CSV ingestion, chronological splits, standardization,
sliding-window sample generation and error metrics.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from pfrp.config import SplitSpec
from pfrp.errors import DataError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeSeries:
    """Raw univariate series with sampling metadata"""
    values: np.ndarray
    name: str = "series"
    freq_label: Optional[str] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size < 2:
            raise DataError(f"series '{self.name}' needs at least 2 values, got {values.size}")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise DataError(f"series '{self.name}' has a non-finite value at position {bad[0]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class IndexRange:
    start: int
    stop: int

    def __len__(self):
        return self.stop - self.start


@dataclass(frozen=True)
class WindowSample:
    """One (lookback, horizon) pair and the position of x[0] in the parent series"""
    x: np.ndarray
    y: np.ndarray
    start_index: int


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def _looks_numeric(cell):
    try:
        float(cell)
        return True
    except (TypeError, ValueError):
        return False


def load_csv(path, column: Union[str, int, None] = None, name=None, freq_label=None):
    """Load one column of a CSV file as a TimeSeries (default: last numeric column)"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")

    raw = pd.read_csv(path, header=None, dtype=str, encoding="utf-8", keep_default_na=False)
    if raw.empty:
        raise DataError(f"dataset file is empty: {path}")
    first_row = [str(c).strip() for c in raw.iloc[0].tolist()]
    rest = raw.iloc[1:]

    # Header row is detected by a parse failure of row 0 in the selected column
    if column is None:
        # Columns with any parsable cell count as numeric
        body = rest if len(rest) else raw
        numeric = [j for j in range(raw.shape[1]) if body[raw.columns[j]].map(_looks_numeric).any()]
        if not numeric or (len(rest) == 0 and not _looks_numeric(first_row[numeric[-1]])):
            raise DataError(f"no numeric column in {path}")
        position = numeric[-1]
        has_header = not _looks_numeric(first_row[position])
    elif isinstance(column, int) or (isinstance(column, str) and column.lstrip("-").isdigit()
                                     and column not in first_row):
        position = int(column)
        if not -raw.shape[1] <= position < raw.shape[1]:
            raise DataError(f"column index {position} out of range for {path}")
        position %= raw.shape[1]
        has_header = not _looks_numeric(first_row[position])
    else:
        if column not in first_row:
            raise DataError(f"column '{column}' not found in header of {path}")
        position = first_row.index(column)
        has_header = True

    selected = first_row[position] if has_header else str(position)
    cells = (rest if has_header else raw)[raw.columns[position]].tolist()
    row_offset = 2 if has_header else 1

    values = np.empty(len(cells), dtype=np.float64)
    for i, cell in enumerate(cells):
        try:
            value = float(cell)
        except (TypeError, ValueError):
            raise DataError(f"row {i + row_offset}: value {cell!r} in column '{selected}' is not a number")
        if not np.isfinite(value):
            raise DataError(f"row {i + row_offset}: non-finite value {cell!r} in column '{selected}'")
        values[i] = value

    logger.info("Loaded %d values from %s (column '%s')", values.size, path, selected)
    return TimeSeries(values=values, name=name or path.stem, freq_label=freq_label)


def chronological_split(ts, spec: SplitSpec, min_length=1) -> Tuple[IndexRange, IndexRange, IndexRange]:
    """
    Split [0, T) into contiguous train/val/test ranges at floor boundaries.

    min_length is either one minimum for every split or a (train, val, test) triple.
    """
    T = len(ts)
    # Tolerance absorbs ratio sums such as 0.7 + 0.1 = 0.7999999999999999
    b1 = int(np.floor(T * spec.train_ratio + 1e-9))
    b2 = int(np.floor(T * (spec.train_ratio + spec.val_ratio) + 1e-9))
    ranges = (IndexRange(0, b1), IndexRange(b1, b2), IndexRange(b2, T))
    minimums = (min_length,) * 3 if np.isscalar(min_length) else tuple(min_length)
    for label, r, minimum in zip(("train", "val", "test"), ranges, minimums):
        if len(r) < minimum:
            raise DataError(f"{label} split holds {len(r)} points, need at least {minimum}")
    return ranges


def window_count(range_len, lookback, horizon, stride=1):
    """Number of windows make_windows produces for a range"""
    if range_len < lookback + horizon:
        return 0
    return (range_len - lookback - horizon) // stride + 1


def make_windows(values, index_range, lookback, horizon, stride=1) -> List[WindowSample]:
    """Slide a (lookback + horizon) window over one split; windows never leave the range"""
    if lookback < 1 or horizon < 1 or stride < 1:
        raise DataError("lookback, horizon and stride must all be at least 1")
    values = values.values if isinstance(values, TimeSeries) else np.asarray(values, dtype=np.float64)
    if len(index_range) < lookback + horizon:
        raise DataError(
            f"range of length {len(index_range)} is shorter than lookback + horizon = {lookback + horizon}"
        )
    samples = []
    for i in range(window_count(len(index_range), lookback, horizon, stride)):
        start = index_range.start + i * stride
        samples.append(WindowSample(
            x=values[start:start + lookback].copy(),
            y=values[start + lookback:start + lookback + horizon].copy(),
            start_index=start,
        ))
    return samples


def stack_windows(samples):
    """Stack samples into (X, Y, starts) arrays"""
    X = np.stack([s.x for s in samples])
    Y = np.stack([s.y for s in samples])
    starts = np.array([s.start_index for s in samples], dtype=np.int64)
    return X, Y, starts


def fit_standardizer(train_values):
    """Population mean/std of the training split"""
    train_values = np.asarray(train_values, dtype=np.float64)
    std = float(np.std(train_values))
    if std <= 1e-12:
        raise DataError("training split is constant; cannot standardize")
    return Standardizer(mean=float(np.mean(train_values)), std=std)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size == 0:
        raise ShapeError(f"metric inputs must have equal non-zero size, got {a.shape} and {b.shape}")
    return a, b


def mse(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def mae(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


@dataclass
class PreparedSeries:
    """A series standardized with train statistics plus its split ranges"""
    series: TimeSeries
    standardizer: Standardizer
    standardized: np.ndarray
    train: IndexRange
    val: IndexRange
    test: IndexRange

    def windows(self, split, lookback, horizon, stride=1):
        return make_windows(self.standardized, getattr(self, split), lookback, horizon, stride)


def prepare_series(ts, spec: SplitSpec, lookback, horizon, train_horizon=None):
    """
    Split, fit the standardizer on train only and standardize the whole series.

    train_horizon sets the window length the train split must hold when it differs from the
    serving horizon (bank windows); val and test always need lookback + horizon points.
    """
    train_need = lookback + (train_horizon or horizon)
    train, val, test = chronological_split(
        ts, spec, min_length=(train_need, lookback + horizon, lookback + horizon)
    )
    standardizer = fit_standardizer(ts.values[train.start:train.stop])
    standardized = standardizer.apply(ts.values)
    return PreparedSeries(ts, standardizer, standardized, train, val, test)
