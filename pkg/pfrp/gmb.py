"""
Stage 1b - Global Memory Bank.

Encodes every training window, keeps only the K medoids of the feature
space (alternating k-medoids under cosine distance) and stores their
(feature, horizon) pairs. Banks persist in a small binary format:

    b"GMB1" | <i4 L, H_bank, d, K, flags, meta_len> | meta JSON |
    <f8 keys K*d> | <f8 values K*H_bank> | [<f8 raw lookbacks K*L>] | <u4 CRC32>
"""

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from pfrp.errors import BankFormatError, ChecksumError, DataError, ShapeError
from pfrp.pcl import encode
from pfrp.series import stack_windows
from pfrp.utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"GMB"
FORMAT_VERSION = b"1"
_HEADER = struct.Struct("<6i")
_FLAG_RAW_X = 1


@dataclass
class KmedoidsResult:
    medoid_indices: np.ndarray
    assignment: np.ndarray
    total_cost: float
    cost_history: List[float] = field(default_factory=list)
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """K (unit feature, horizon) exemplars plus build metadata"""
    keys: np.ndarray
    values: np.ndarray
    lookback: int
    encoder_hash: str
    source_indices: np.ndarray
    raw_x: Optional[np.ndarray] = None
    seed: int = 0
    dataset_name: str = ""

    def __post_init__(self):
        for name in ("keys", "values", "source_indices", "raw_x"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.keys.shape[0] != self.values.shape[0] or self.keys.shape[0] != self.source_indices.shape[0]:
            raise ShapeError("bank keys, values and source indices must have one row per entry")
        if self.raw_x is not None and self.raw_x.shape != (self.size, self.lookback):
            raise ShapeError(f"raw lookbacks must be ({self.size}, {self.lookback}), got {self.raw_x.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("bank values must be finite")

    @property
    def size(self):
        return int(self.keys.shape[0])

    @property
    def feature_dim(self):
        return int(self.keys.shape[1])

    @property
    def horizon(self):
        return int(self.values.shape[1])

    def equals(self, other):
        same_raw = (self.raw_x is None and other.raw_x is None) or (
            self.raw_x is not None and other.raw_x is not None and np.array_equal(self.raw_x, other.raw_x))
        return (
            same_raw
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.source_indices, other.source_indices)
            and (self.lookback, self.encoder_hash, self.seed, self.dataset_name)
            == (other.lookback, other.encoder_hash, other.seed, other.dataset_name)
        )


def encoder_hash(model):
    """sha256 over architecture and parameter bytes"""
    h = hashlib.sha256()
    h.update(json.dumps([model.layer_dims, model.hidden_activation, model.output_activation]).encode())
    for arr in model.weights + model.biases:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def cosine_distances(points, medoids):
    """1 - a.b for unit vectors, clipped at 0"""
    return np.maximum(1.0 - points @ medoids.T, 0.0)


def _plus_plus_init(points, K, rng):
    """k-means++ style seeding: sample next medoid proportional to squared distance"""
    N = points.shape[0]
    chosen = [int(rng.integers(N))]
    closest = cosine_distances(points, points[chosen[0]][None, :])[:, 0]
    closest[chosen[0]] = 0.0
    while len(chosen) < K:
        weights = closest ** 2
        weights[chosen] = 0.0
        total = weights.sum()
        if total > 0.0:
            nxt = int(rng.choice(N, p=weights / total))
        else:
            # Every remaining point coincides with a medoid
            remaining = np.setdiff1d(np.arange(N), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        closest = np.minimum(closest, cosine_distances(points, points[nxt][None, :])[:, 0])
        closest[nxt] = 0.0
    return np.sort(np.array(chosen, dtype=np.int64))


def _assign(points, medoids):
    """Nearest medoid per point (ties to the lowest medoid slot) and the resulting cost"""
    D = cosine_distances(points, points[medoids])
    D[medoids, np.arange(medoids.size)] = 0.0
    assignment = np.argmin(D, axis=1)
    assignment[medoids] = np.arange(medoids.size)
    cost = float(D[np.arange(points.shape[0]), assignment].sum())
    return assignment, cost


def _update_medoids(points, medoids, assignment):
    """Per cluster, move the medoid to the member with the smallest summed cosine distance"""
    updated = medoids.copy()
    for c in range(medoids.size):
        members = np.flatnonzero(assignment == c)
        if members.size <= 1:
            continue
        # sum_j (1 - p_i.p_j) = n - p_i . sum_j p_j
        within = members.size - points[members] @ points[members].sum(axis=0)
        current = within[np.searchsorted(members, medoids[c])]
        best = int(np.argmin(within))
        if within[best] < current - 1e-12:
            updated[c] = members[best]
    return updated


def _kmedoids_once(points, K, rng, max_iter):
    medoids = _plus_plus_init(points, K, rng)
    assignment, cost = _assign(points, medoids)
    history = [cost]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        candidate = _update_medoids(points, medoids, assignment)
        if np.array_equal(candidate, medoids):
            break
        # Keep slots sorted so slot order equals point order for tie-breaking
        medoids = np.sort(candidate)
        assignment, cost = _assign(points, medoids)
        history.append(cost)
    return KmedoidsResult(medoids, assignment, cost, history, iterations)


def kmedoids(points, K, seed=0, max_iter=100, n_init=10):
    """Alternating k-medoids with k-means++ seeding under cosine distance"""
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[0]
    if K < 1 or K > N:
        raise DataError(f"K must lie in [1, {N}], got {K}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        result = _kmedoids_once(points, K, rng, max_iter)
        if best is None or result.total_cost < best.total_cost:
            best = result
    logger.info("k-medoids K=%d over %d points: cost %.6f after %d iterations",
                K, N, best.total_cost, best.iterations)
    return best


def build_bank(encoder, samples, K, horizon, seed=0, dataset_name="", store_raw_x=False, max_iter=100, n_init=10):
    """Encode all samples, cluster the features and keep the K medoid pairs"""
    if len(samples) < K:
        raise DataError(f"bank of size K={K} needs at least K training windows, got {len(samples)}")
    X, Y, starts = stack_windows(samples)
    if X.shape[1] != encoder.input_dim:
        raise ShapeError(f"encoder expects lookback {encoder.input_dim}, samples have {X.shape[1]}")
    if Y.shape[1] != horizon:
        raise ShapeError(f"samples carry horizon {Y.shape[1]}, bank horizon is {horizon}")

    features = encode(encoder, X)
    result = kmedoids(features, K, seed=seed, max_iter=max_iter, n_init=n_init)
    chosen = result.medoid_indices
    return MemoryBank(
        keys=features[chosen],
        values=Y[chosen],
        lookback=X.shape[1],
        encoder_hash=encoder_hash(encoder),
        source_indices=starts[chosen],
        raw_x=X[chosen] if store_raw_x else None,
        seed=seed,
        dataset_name=dataset_name,
    )


def slice_horizon(y, horizon):
    """Prefix of length horizon of a stored horizon sequence"""
    y = np.asarray(y)
    if horizon < 1 or horizon > y.shape[-1]:
        raise DataError(f"horizon {horizon} exceeds stored horizon {y.shape[-1]}")
    return y[..., :horizon]


def check_encoder(bank, encoder):
    """Warn when a bank was built by a different encoder than the one serving it"""
    actual = encoder_hash(encoder)
    if actual != bank.encoder_hash:
        logger.warning("Bank encoder hash %s does not match serving encoder %s",
                       bank.encoder_hash[:12], actual[:12])
        return False
    return True


def bank_to_bytes(bank):
    meta = json.dumps({
        "encoder_hash": bank.encoder_hash,
        "seed": bank.seed,
        "dataset_name": bank.dataset_name,
        "source_indices": [int(i) for i in bank.source_indices],
    }, sort_keys=True).encode("utf-8")
    flags = _FLAG_RAW_X if bank.raw_x is not None else 0
    parts = [
        MAGIC + FORMAT_VERSION,
        _HEADER.pack(bank.lookback, bank.horizon, bank.feature_dim, bank.size, flags, len(meta)),
        meta,
        np.ascontiguousarray(bank.keys, dtype="<f8").tobytes(),
        np.ascontiguousarray(bank.values, dtype="<f8").tobytes(),
    ]
    if bank.raw_x is not None:
        parts.append(np.ascontiguousarray(bank.raw_x, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def bank_from_bytes(blob):
    if len(blob) < 4 or blob[:3] != MAGIC:
        raise BankFormatError("not a memory bank file (bad magic bytes)")
    if blob[3:4] != FORMAT_VERSION:
        raise BankFormatError(f"unsupported bank format version {blob[3:4]!r}")
    if len(blob) < 4 + _HEADER.size + 4:
        raise ChecksumError("bank file is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("bank file failed its CRC32 check")

    L, H, d, K, flags, meta_len = _HEADER.unpack_from(body, 4)
    offset = 4 + _HEADER.size
    meta = json.loads(body[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len

    def take(rows, cols):
        nonlocal offset
        n = rows * cols * 8
        arr = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += n
        return arr.astype(np.float64)

    keys = take(K, d)
    values = take(K, H)
    raw_x = take(K, L) if flags & _FLAG_RAW_X else None
    if offset != len(body):
        raise BankFormatError("bank payload length does not match its header")
    return MemoryBank(
        keys=keys, values=values, lookback=L, encoder_hash=meta["encoder_hash"],
        source_indices=np.array(meta["source_indices"], dtype=np.int64), raw_x=raw_x,
        seed=meta["seed"], dataset_name=meta["dataset_name"],
    )


def save_bank(bank, path):
    return atomic_write_bytes(path, bank_to_bytes(bank))


def load_bank(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"bank file not found: {path}")
    return bank_from_bytes(path.read_bytes())
