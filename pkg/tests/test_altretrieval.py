from functools import lru_cache

import numpy as np
import pytest

from pfrp.altretrieval import (
    dtw_distance,
    pcc,
    rank_topk,
    retrieve_topk_by,
)
from pfrp.errors import DataError
from pfrp.forecaster import retrieve_topk
from pfrp.gmb import MemoryBank
from pfrp.pcl import encode


def _random_bank(rng, K=64, d=8, L=6, H=5, raw=True):
    keys = rng.normal(size=(K, d))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    return MemoryBank(
        keys=keys, values=rng.normal(size=(K, H)), lookback=L, encoder_hash="test",
        source_indices=np.arange(K), raw_x=rng.normal(size=(K, L)) if raw else None,
    )


def _oracle(scores, k, descending):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i] if descending else scores[i], i))
    return np.array(order[:k])


def _recursive_dtw(a, b):
    @lru_cache(maxsize=None)
    def D(i, j):
        if i == 0 and j == 0:
            return 0.0
        if i == 0 or j == 0:
            return np.inf
        return abs(a[i - 1] - b[j - 1]) + min(D(i - 1, j), D(i, j - 1), D(i - 1, j - 1))

    return D(len(a), len(b))


class TestFeatureRetrieval:
    def test_matches_full_scan_oracle(self):
        for case in range(100):
            rng = np.random.default_rng(case)
            bank = _random_bank(rng)
            eps = rng.normal(size=8)
            eps /= np.linalg.norm(eps)
            scores = bank.keys @ eps
            for k in (1, 5, 64):
                r = retrieve_topk(bank, eps, k)
                expected = _oracle(scores, k, descending=True)
                np.testing.assert_array_equal(r.indices, expected)
                np.testing.assert_array_equal(r.similarities, scores[expected])
                np.testing.assert_array_equal(r.values, bank.values[expected])

    def test_stored_key_comes_first(self, rng):
        bank = _random_bank(rng)
        r = retrieve_topk(bank, bank.keys[17].copy(), 3)
        assert r.indices[0] == 17
        assert abs(r.similarities[0] - 1.0) < 1e-9

    def test_k_equals_bank_size_is_sorted(self, rng):
        bank = _random_bank(rng)
        eps = bank.keys[0].copy()
        r = retrieve_topk(bank, eps, bank.size)
        assert np.all(np.diff(r.similarities) <= 0)
        assert sorted(r.indices.tolist()) == list(range(bank.size))

    def test_k_larger_than_bank(self, rng):
        bank = _random_bank(rng, K=4)
        with pytest.raises(DataError):
            retrieve_topk(bank, bank.keys[0].copy(), 5)

    def test_rejects_non_unit_query(self, rng):
        with pytest.raises(DataError):
            retrieve_topk(_random_bank(rng), np.full(8, 2.0), 1)

    def test_horizon_slicing(self, rng):
        bank = _random_bank(rng)
        r = retrieve_topk(bank, bank.keys[3].copy(), 2, horizon=2)
        assert r.values.shape == (2, 2)

    def test_exclusion(self, rng):
        bank = _random_bank(rng)
        r = retrieve_topk(bank, bank.keys[9].copy(), 4, exclude=9)
        assert 9 not in r.indices.tolist()

    def test_criterion_entry_point_agrees(self, tiny):
        x = tiny.samples[5].x
        a = retrieve_topk_by("feature", tiny.bank, x, 3, horizon=4, encoder=tiny.encoder)
        b = retrieve_topk(tiny.bank, encode(tiny.encoder, x), 3, horizon=4)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.similarities, b.similarities)


class TestRankTopk:
    def test_ties_go_to_lower_index(self):
        np.testing.assert_array_equal(rank_topk(np.array([1.0, 1.0, 0.0]), 1, descending=True), [0])
        np.testing.assert_array_equal(rank_topk(np.array([2.0, 0.5, 0.5]), 2, descending=False), [1, 2])


class TestWindowCriteria:
    @pytest.mark.parametrize("criterion", ["mse", "dtw", "pcc"])
    def test_match_full_scan_oracle(self, criterion):
        for case in range(100):
            rng = np.random.default_rng(500 + case)
            bank = _random_bank(rng)
            x = rng.normal(size=6)
            if criterion == "mse":
                scores = np.array([np.mean((row - x) ** 2) for row in bank.raw_x])
            elif criterion == "dtw":
                scores = np.array([_recursive_dtw(tuple(x), tuple(row)) for row in bank.raw_x])
            else:
                scores = np.array([pcc(x, row) for row in bank.raw_x])
            descending = criterion == "pcc"
            for k in (1, 5, 64):
                r = retrieve_topk_by(criterion, bank, x, k)
                expected = _oracle(scores, k, descending)
                np.testing.assert_array_equal(r.indices, expected)
                np.testing.assert_allclose(r.scores, scores[expected], rtol=1e-12, atol=1e-15)
                sign = 1.0 if descending else -1.0
                np.testing.assert_array_equal(r.similarities, sign * r.scores)

    def test_constant_query_under_pcc(self, rng):
        bank = _random_bank(rng)
        r = retrieve_topk_by("pcc", bank, np.zeros(6), 3)
        np.testing.assert_array_equal(r.indices, [0, 1, 2])
        np.testing.assert_array_equal(r.scores, np.zeros(3))

    def test_needs_raw_lookbacks(self, rng):
        with pytest.raises(DataError):
            retrieve_topk_by("dtw", _random_bank(rng, raw=False), rng.normal(size=6), 2)

    def test_unknown_criterion(self, rng):
        with pytest.raises(DataError):
            retrieve_topk_by("cosine-ish", _random_bank(rng), rng.normal(size=6), 2)


class TestDtw:
    def test_matches_recursive_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            a = rng.normal(size=int(rng.integers(1, 13)))
            b = rng.normal(size=int(rng.integers(1, 13)))
            assert dtw_distance(a, b) == _recursive_dtw(tuple(a), tuple(b))

    def test_identity_and_symmetry(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = rng.normal(size=10)
            b = rng.normal(size=8)
            assert dtw_distance(a, a) == 0.0
            assert abs(dtw_distance(a, b) - dtw_distance(b, a)) < 1e-12

    def test_time_shift_is_cheap(self):
        a = np.array([0.0, 0.0, 1.0, 2.0, 1.0, 0.0])
        b = np.array([0.0, 1.0, 2.0, 1.0, 0.0, 0.0])
        assert dtw_distance(a, b) == 0.0


class TestPcc:
    def test_perfect_correlations(self, rng):
        x = rng.normal(size=20)
        assert abs(pcc(x, 2.0 * x + 1.0) - 1.0) < 1e-12
        assert abs(pcc(x, -x) + 1.0) < 1e-12

    def test_zero_variance(self):
        with pytest.raises(DataError):
            pcc(np.ones(5), np.arange(5.0))
