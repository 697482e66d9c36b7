"""
Periodicity analysis and global-weight diagnostics.

The periodicity score multiplies the mean autocorrelation at known
seasonal lags (clamped at 0) by one minus the normalized histogram
entropy of the values.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np
import pandas as pd
from scipy.stats import entropy

from pfrp.chart_styles import create_scatter_chart, write_svg
from pfrp.config import DEFAULT_LAGS, PeriodicityConfig
from pfrp.errors import DataError
from pfrp.utils import atomic_write_csv

logger = logging.getLogger(__name__)


def _values(ts):
    return np.asarray(getattr(ts, "values", ts), dtype=np.float64).ravel()


def acf(ts, lag):
    """Autocorrelation at one lag, normalized by the full-series sum of squares"""
    x = _values(ts)
    T = x.size
    if not 1 <= lag < T:
        raise DataError(f"lag must lie in [1, {T - 1}], got {lag}")
    centered = x - x.mean()
    denom = float(np.dot(centered, centered))
    if denom / T <= 1e-12:
        raise DataError("autocorrelation is undefined for a constant series")
    return float(np.dot(centered[:-lag], centered[lag:]) / denom)


def normalized_entropy(ts, bins=20):
    """Entropy of an equal-width histogram over [min, max], divided by log(bins)"""
    x = _values(ts)
    if x.size < 1:
        raise DataError("entropy needs at least one value")
    if bins < 2:
        raise DataError(f"bins must be at least 2, got {bins}")
    if x.min() == x.max():
        return 0.0
    counts, _ = np.histogram(x, bins=bins, range=(x.min(), x.max()))
    return float(entropy(counts) / np.log(bins))


def inv_entropy(ts, bins=20):
    return 1.0 - normalized_entropy(ts, bins)


@dataclass
class PeriodicityComponents:
    acf_values: Dict[int, float] = field(default_factory=dict)
    acf_score: float = 0.0
    entropy: float = 0.0
    inv_entropy: float = 1.0
    score: float = 0.0


def periodicity_components(ts, config: PeriodicityConfig = None):
    config = config or PeriodicityConfig()
    values = {lag: acf(ts, lag) for lag in config.lags}
    # Negative mean autocorrelation counts as no periodicity
    acf_score = max(float(np.mean(list(values.values()))), 0.0)
    ent = normalized_entropy(ts, config.bins)
    result = PeriodicityComponents(values, acf_score, ent, 1.0 - ent, acf_score * (1.0 - ent))
    logger.info("Periodicity score %.4f (acf %.4f, inv entropy %.4f)", result.score, acf_score, 1.0 - ent)
    return result


def periodicity_score(ts, config: PeriodicityConfig = None):
    return periodicity_components(ts, config).score


def default_lags(freq_label):
    """Day and week lags in samples for a sampling interval label"""
    try:
        return list(DEFAULT_LAGS[freq_label])
    except KeyError:
        raise DataError(f"no default lags for sampling interval '{freq_label}'; pass lags explicitly")


@dataclass
class WeightSummary:
    count: int
    mean: float
    std: float
    min: float
    max: float
    quantiles: Dict[str, float] = field(default_factory=dict)

    def to_dict(self):
        return {"count": self.count, "mean": self.mean, "std": self.std, "min": self.min, "max": self.max,
                **self.quantiles}


def weight_report(predictions, csv_path=None, svg_path=None, title="Global fusion weight per test window"):
    """Summary of w1 over predictions; optionally writes the per-sample CSV and a scatter SVG"""
    if not predictions:
        raise DataError("weight report needs at least one prediction")
    w1 = np.array([p.fusion[0] for p in predictions], dtype=np.float64)
    summary = WeightSummary(
        count=int(w1.size),
        mean=float(np.mean(w1)),
        std=float(np.std(w1)),
        min=float(np.min(w1)),
        max=float(np.max(w1)),
        quantiles={f"q{int(q * 100)}": float(np.quantile(w1, q)) for q in (0.25, 0.5, 0.75)},
    )
    frame = pd.DataFrame({"window": np.arange(w1.size), "w1": w1})
    if csv_path is not None:
        atomic_write_csv(csv_path, frame)
    if svg_path is not None:
        write_svg(create_scatter_chart(frame, x="window", y="w1", title=title), svg_path)
    return summary
