"""
Utility functions shared by the pipeline stages
"""

import os
import tempfile
from pathlib import Path

import numpy as np


def ensure_dir(path):
    """Create a directory (and parents) if it does not exist"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path, payload):
    """Write bytes to a temp file next to path, then rename over it"""
    path = Path(path)
    ensure_dir(path.parent)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path, text):
    """Write UTF-8 text atomically"""
    return atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_csv(path, df):
    """Write a DataFrame as CSV atomically, floats in round-trip precision"""
    return atomic_write_text(path, df.to_csv(index=False, float_format="%.17g"))


def improvement_pct(base, new):
    """Relative improvement of new over base in percent"""
    if base == 0:
        return 0.0
    return (base - new) / base * 100.0


def format_vector(values):
    """Serialize a vector as space-separated round-trip floats for one CSV cell"""
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def parse_vector(cell):
    """Inverse of format_vector"""
    return np.array([float(tok) for tok in str(cell).split()], dtype=np.float64)


def make_rng(seed):
    """Seeded numpy generator used everywhere randomness is needed"""
    return np.random.default_rng(seed)
