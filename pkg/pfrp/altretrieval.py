"""
Retrieval criteria for the memory bank.

The default criterion ranks bank entries by cosine similarity of encoder
features. The alternatives compare the raw lookback window against the raw
lookbacks stored with each entry (bank built with store_raw_x):
mean squared error, dynamic time warping and Pearson correlation.
"""

import logging
from dataclasses import dataclass

import numpy as np

from pfrp.errors import DataError
from pfrp.gmb import slice_horizon
from pfrp.pcl import encode

logger = logging.getLogger(__name__)

CRITERIA = ("feature_cosine", "window_mse", "window_dtw", "window_pcc")
CLI_NAMES = {"feature": "feature_cosine", "mse": "window_mse", "dtw": "window_dtw", "pcc": "window_pcc"}
# Criteria where a larger score means more similar
DESCENDING = frozenset({"feature_cosine", "window_pcc"})


@dataclass(frozen=True)
class Retrieval:
    """Top-k bank entries for one query, most similar first"""
    indices: np.ndarray
    scores: np.ndarray
    similarities: np.ndarray
    values: np.ndarray


def resolve_criterion(name):
    criterion = CLI_NAMES.get(name, name)
    if criterion not in CRITERIA:
        raise DataError(f"unknown retrieval criterion '{name}'")
    return criterion


def rank_topk(scores, k, descending, exclude=None):
    """Indices of the k best scores; ties go to the lower index"""
    scores = np.asarray(scores, dtype=np.float64)
    available = scores.size - (0 if exclude is None else 1)
    if k < 1 or k > available:
        raise DataError(f"k must lie in [1, {available}], got {k}")
    order = np.argsort(-scores if descending else scores, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return order[:k]


def cosine_scores(bank, eps):
    """Dot products of a unit query feature with every bank key"""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (bank.feature_dim,):
        raise DataError(f"query feature must have length {bank.feature_dim}, got shape {eps.shape}")
    if abs(np.linalg.norm(eps) - 1.0) > 1e-6:
        raise DataError("query feature must be unit-norm")
    return bank.keys @ eps


def dtw_distances(query, candidates):
    """DTW (absolute-difference cost, no band) from one series to each row of candidates"""
    a = np.asarray(query, dtype=np.float64).ravel()
    C = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    n, m = a.size, C.shape[1]
    if n == 0 or m == 0:
        raise DataError("DTW needs non-empty inputs")
    D = np.full((n + 1, m + 1, C.shape[0]), np.inf)
    D[0, 0] = 0.0
    # Cells on one anti-diagonal depend only on the previous two diagonals
    for s in range(2, n + m + 1):
        ii = np.arange(max(1, s - m), min(n, s - 1) + 1)
        jj = s - ii
        cost = np.abs(a[ii - 1][:, None] - C[:, jj - 1].T)
        best = np.minimum(np.minimum(D[ii - 1, jj], D[ii, jj - 1]), D[ii - 1, jj - 1])
        D[ii, jj] = cost + best
    return D[n, m].copy()


def dtw_distance(a, b):
    return float(dtw_distances(a, np.asarray(b, dtype=np.float64)[None, :])[0])


def _pcc_rows(query, windows):
    q = np.asarray(query, dtype=np.float64)
    W = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    if q.size < 2 or W.shape[1] != q.size:
        raise DataError("PCC needs equal-length inputs of at least 2 values")
    qc = q - q.mean()
    Wc = W - W.mean(axis=1, keepdims=True)
    num = np.sum(Wc * qc, axis=1)
    den = np.sqrt(np.sum(qc * qc) * np.sum(Wc * Wc, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.clip(num / den, -1.0, 1.0)
    flat = (np.var(W, axis=1) <= 1e-12) | (np.var(q) <= 1e-12)
    r[flat] = np.nan
    return r


def pcc(a, b):
    """Pearson correlation of two equal-length series"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.var(a) <= 1e-12 or np.var(b) <= 1e-12:
        raise DataError("PCC is undefined for a zero-variance input")
    return float(_pcc_rows(a, b[None, :])[0])


def window_mse_scores(query, windows):
    q = np.asarray(query, dtype=np.float64)
    return np.mean((np.atleast_2d(windows) - q) ** 2, axis=1)


def criterion_scores(criterion, bank, x, encoder=None):
    """Score of every bank entry under a criterion"""
    if criterion == "feature_cosine":
        if encoder is None:
            raise DataError("feature retrieval needs the encoder")
        return cosine_scores(bank, encode(encoder, x))
    if bank.raw_x is None:
        raise DataError(f"criterion '{criterion}' needs raw lookback windows; rebuild the bank with --store-raw-x")
    x = np.asarray(x, dtype=np.float64)
    if criterion == "window_mse":
        return window_mse_scores(x, bank.raw_x)
    if criterion == "window_dtw":
        return dtw_distances(x, bank.raw_x)
    if criterion == "window_pcc":
        # Flat windows, stored or queried, count as uncorrelated
        if np.var(x) <= 1e-12:
            return np.zeros(len(bank.raw_x))
        return np.nan_to_num(_pcc_rows(x, bank.raw_x), nan=0.0)
    raise DataError(f"unknown retrieval criterion '{criterion}'")


def retrieval_from_scores(criterion, bank, scores, k, horizon, exclude=None):
    descending = criterion in DESCENDING
    idx = rank_topk(scores, k, descending, exclude)
    top = scores[idx]
    # Distances become similarities by negation
    similarities = top if descending else -top
    return Retrieval(idx, top, similarities, slice_horizon(bank.values[idx], horizon))


def retrieve_topk_by(criterion, bank, x, k, horizon=None, encoder=None, exclude=None):
    """Top-k retrieval under any criterion; same tie-breaking and slicing as feature retrieval"""
    criterion = resolve_criterion(criterion)
    scores = criterion_scores(criterion, bank, x, encoder)
    return retrieval_from_scores(criterion, bank, scores, k, horizon or bank.horizon, exclude)
