"""
This module generates synthetic univariate series for experiments and tests.
Every generator is seeded so the same arguments always give the same series.
"""

import logging

import numpy as np
import pandas as pd

from pfrp.errors import DataError
from pfrp.utils import atomic_write_csv, make_rng

logger = logging.getLogger(__name__)

DAY = 24
WEEK = 7 * DAY

# Motif used on each day of the week (Monday first)
WEEKLY_SCHEDULE = [0, 0, 1, 0, 0, 2, 2]


def _check_length(length):
    if length < 2:
        raise DataError(f"series length must be at least 2, got {length}")


def make_motifs(n_motifs=3, period=DAY, seed=0):
    """Smooth daily shapes built from a few random harmonics"""
    rng = make_rng(seed)
    t = np.arange(period) / period
    motifs = []
    for _ in range(n_motifs):
        shape = np.zeros(period)
        for harmonic in range(1, 4):
            amplitude = rng.uniform(0.3, 1.5) / harmonic
            phase = rng.uniform(0.0, 2.0 * np.pi)
            shape += amplitude * np.sin(2.0 * np.pi * harmonic * t + phase)
        motifs.append(shape)
    return np.stack(motifs)


def generate_motif_series(length=20000, noise=0.2, n_motifs=3, period=DAY, seed=0, schedule=None):
    """Recurring daily motifs on a weekly schedule plus Gaussian noise"""
    _check_length(length)
    schedule = WEEKLY_SCHEDULE if schedule is None else schedule
    if max(schedule) >= n_motifs:
        raise DataError("weekly schedule references a motif that does not exist")
    motifs = make_motifs(n_motifs, period, seed)
    days = -(-length // period)
    clean = np.concatenate([motifs[schedule[d % len(schedule)]] for d in range(days)])[:length]
    rng = make_rng(seed + 1)
    return clean + rng.normal(0.0, noise, size=length)


def generate_traffic_series(length=20000, seed=0):
    """Hourly visitor-count style series with rush hours, weekend boost and a slight trend"""
    _check_length(length)
    rng = make_rng(seed)
    hours = np.arange(length)
    hour_of_day = hours % DAY
    day_of_week = (hours // DAY) % 7

    base = np.full(length, 30.0)
    base[(hour_of_day >= 7) & (hour_of_day <= 9)] = 70.0       # Morning rush
    base[(hour_of_day >= 11) & (hour_of_day <= 13)] = 60.0     # Lunch
    base[(hour_of_day >= 16) & (hour_of_day <= 19)] = 80.0     # Evening rush
    base[(hour_of_day >= 20) & (hour_of_day <= 22)] = 40.0     # Evening
    base[hour_of_day <= 5] = 15.0                              # Late night

    weekend = day_of_week >= 5
    base[weekend & (hour_of_day >= 9) & (hour_of_day <= 18)] *= 1.3
    trend = 1.0 + 0.00001 * hours
    values = base * trend * rng.normal(1.0, 0.1, size=length)
    return np.maximum(values, 0.0)


def generate_sine(length=20000, period=DAY, amplitude=1.0, noise=0.0, seed=0):
    _check_length(length)
    values = amplitude * np.sin(2.0 * np.pi * np.arange(length) / period)
    if noise > 0:
        values = values + make_rng(seed).normal(0.0, noise, size=length)
    return values


def generate_white_noise(length=20000, sigma=1.0, seed=0):
    _check_length(length)
    return make_rng(seed).normal(0.0, sigma, size=length)


GENERATORS = {
    "motifs": generate_motif_series,
    "traffic": generate_traffic_series,
    "sine": generate_sine,
    "noise": generate_white_noise,
}


def generate_series(kind, length=20000, seed=0, **kwargs):
    try:
        generator = GENERATORS[kind]
    except KeyError:
        raise DataError(f"unknown generator '{kind}'; choose one of {sorted(GENERATORS)}")
    return generator(length=length, seed=seed, **kwargs)


def write_series_csv(path, values, column="value", start="2020-01-01", freq="h"):
    """Write a series as a (date, value) CSV that load_csv reads back"""
    values = np.asarray(values, dtype=np.float64)
    frame = pd.DataFrame({
        "date": pd.date_range(start=start, periods=values.size, freq=freq).strftime("%Y-%m-%d %H:%M:%S"),
        column: values,
    })
    atomic_write_csv(path, frame)
    logger.info("Wrote %d synthetic values to %s", values.size, path)
    return path
