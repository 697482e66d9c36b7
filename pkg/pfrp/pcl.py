"""
Stage 1a - lookback-window encoder trained with Predictive Contrastive Learning.

Positives are picked by the MSE between horizon sequences (PCL), by the MSE
between lookback windows (CL), or replaced by a forecasting head (PL).
Encoder features are L2-normalized so a dot product is a cosine similarity.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from pfrp.config import EncoderConfig
from pfrp.errors import DataError, NumericError, ShapeError
from pfrp.nn import adam_step, init_adam, init_mlp, mlp_backward, mlp_forward, softmax
from pfrp.series import stack_windows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodedSample:
    eps: np.ndarray
    y: np.ndarray
    start_index: int


@dataclass
class EncoderTrainingResult:
    model: object
    loss_curve: List[float] = field(default_factory=list)
    steps: int = 0


def is_eligible(start_i, start_j, lookback, overlap_threshold):
    """Two windows may pair only if their lookbacks share at most overlap_threshold timestamps"""
    return abs(int(start_i) - int(start_j)) >= lookback - overlap_threshold


def _positive_for_row(targets, starts, i, lookback, overlap_threshold):
    gaps = np.abs(starts - starts[i])
    eligible = gaps >= lookback - overlap_threshold
    eligible[i] = False
    if not eligible.any():
        return None
    dist = np.sum((targets - targets[i]) ** 2, axis=1)
    dist[~eligible] = np.inf
    # argmin returns the first minimum, so ties go to the smallest index
    return int(np.argmin(dist))


def positive_indices(targets, starts, lookback, overlap_threshold):
    """Positive index (or None) for every row of a batch"""
    targets = np.asarray(targets, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    return [_positive_for_row(targets, starts, i, lookback, overlap_threshold) for i in range(len(starts))]


def select_positive(batch, i, overlap_threshold, by="horizon"):
    """Index of the eligible sample whose horizon (or lookback, by='lookback') is closest to sample i"""
    if len(batch) < 2:
        raise DataError("positive selection needs a batch of at least 2 samples")
    lookback = batch[i].x.size
    targets = np.stack([s.y if by == "horizon" else s.x for s in batch])
    starts = np.array([s.start_index for s in batch], dtype=np.int64)
    return _positive_for_row(targets, starts, i, lookback, overlap_threshold)


def pcl_loss(features, positives, tau):
    """InfoNCE over in-batch negatives; returns (loss, d loss / d features)"""
    F = np.asarray(features, dtype=np.float64)
    B = F.shape[0]
    rows = np.array([i for i, p in enumerate(positives) if p is not None and p >= 0], dtype=np.int64)
    if rows.size == 0:
        raise DataError("no row in the batch has a positive sample")
    pos = np.array([positives[i] for i in rows], dtype=np.int64)

    logits = (F @ F.T) / tau
    np.fill_diagonal(logits, -np.inf)
    log_z = logsumexp(logits[rows], axis=1)
    loss = -float(np.mean(logits[rows, pos] - log_z))

    # d loss / d logits, rows without a positive contribute nothing
    G = np.zeros((B, B))
    G[rows] = softmax(logits[rows], axis=1)
    G[rows, pos] -= 1.0
    G /= rows.size
    grads = (G + G.T) @ F / tau
    return loss, grads


def _normalize(raw):
    norms = np.linalg.norm(raw, axis=1)
    eps = np.zeros_like(raw)
    nonzero = norms > 0.0
    eps[nonzero] = raw[nonzero] / norms[nonzero, None]
    # Degenerate rule: a zero raw output maps to the first basis vector
    eps[~nonzero, 0] = 1.0
    return eps, norms


def _normalize_backward(eps, norms, d_eps):
    d_raw = np.zeros_like(d_eps)
    nonzero = norms > 0.0
    e = eps[nonzero]
    g = d_eps[nonzero]
    d_raw[nonzero] = (g - e * np.sum(e * g, axis=1, keepdims=True)) / norms[nonzero, None]
    return d_raw


def encode(model, x):
    """Unit-norm features for one lookback vector or a batch of them"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"encoder expects lookback length {model.input_dim}, got {x.shape[-1]}")
    raw, _ = mlp_forward(model, x)
    eps, _ = _normalize(raw)
    return eps[0] if single else eps


def encode_samples(model, samples):
    """Encode WindowSamples into EncodedSamples"""
    X, _, _ = stack_windows(samples)
    eps = encode(model, X)
    return [EncodedSample(e, s.y, s.start_index) for e, s in zip(eps, samples)]


def build_encoder(config: EncoderConfig, rng):
    dims = [config.lookback] + list(config.hidden_dims) + [config.feature_dim]
    return init_mlp(dims, rng)


def _batch_step(model, head, X, Y, starts, config, with_grads):
    """Loss (and gradients) for one batch under the configured strategy"""
    raw, cache = mlp_forward(model, X)
    eps, norms = _normalize(raw)

    if config.strategy == "pl":
        pred, head_cache = mlp_forward(head, eps)
        loss = float(np.mean((pred - Y) ** 2))
        if not with_grads:
            return loss, None, None
        head_grads, d_eps = mlp_backward(head, head_cache, 2.0 * (pred - Y) / pred.size)
    else:
        targets = Y if config.strategy == "pcl" else X
        positives = positive_indices(targets, starts, config.lookback, config.overlap_threshold)
        if all(p is None for p in positives):
            return None, None, None
        loss, d_eps = pcl_loss(eps, positives, config.tau)
        head_grads = None
        if not with_grads:
            return loss, None, None

    grads, _ = mlp_backward(model, cache, _normalize_backward(eps, norms, d_eps))
    return loss, grads, head_grads


def train_encoder(samples, config: EncoderConfig, progress=False):
    """Train the lookback encoder; loss_curve[0] is the loss at initialization"""
    N = len(samples)
    if N < config.batch_size:
        raise DataError(f"encoder training needs at least batch_size={config.batch_size} samples, got {N}")
    X, Y, starts = stack_windows(samples)
    if X.shape[1] != config.lookback:
        raise ShapeError(f"samples have lookback {X.shape[1]}, config expects {config.lookback}")

    rng = np.random.default_rng(config.seed)
    model = build_encoder(config, rng)
    head = init_mlp([config.feature_dim, Y.shape[1]], rng) if config.strategy == "pl" else None
    opt = init_adam(model, config.lr)
    head_opt = init_adam(head, config.lr) if head is not None else None
    result = EncoderTrainingResult(model=model)

    def run_epoch(order, train):
        losses = []
        for lo in range(0, N, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads, head_grads = _batch_step(model, head, X[idx], Y[idx], starts[idx], config, train)
            if loss is None:
                logger.debug("Skipping batch at offset %d: no eligible positives", lo)
                continue
            if not np.isfinite(loss):
                raise NumericError(f"non-finite encoder loss at step {result.steps}")
            losses.append(loss)
            if train:
                adam_step(model, grads, opt)
                if head is not None:
                    adam_step(head, head_grads, head_opt)
                result.steps += 1
        return float(np.mean(losses)) if losses else float("nan")

    result.loss_curve.append(run_epoch(np.arange(N), train=False))
    logger.info("Encoder (%s) initial loss %.6f", config.strategy, result.loss_curve[0])
    for epoch in tqdm(range(config.epochs), desc="encoder", disable=not progress):
        epoch_loss = run_epoch(rng.permutation(N), train=True)
        result.loss_curve.append(epoch_loss)
        logger.info("Encoder epoch %d/%d loss %.6f", epoch + 1, config.epochs, epoch_loss)
    return result
