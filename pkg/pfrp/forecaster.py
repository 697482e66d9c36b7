"""
Stage 2 - predicting the future by retrieving the past.

A query lookback is encoded, its top-k bank neighbours are retrieved, a
confidence gate rescales their similarities, an output gate applies a
per-step scale and shift to the weighted global prediction y1, and a
fusion MLP mixes y1 with a local model's prediction y2.

The forward pass is written for batches with explicit caches so the whole
graph (gates, fusion, local model) can be trained with hand-written
backprop. The encoder and bank are frozen; retrieved indices and
similarities are constants of the graph.
"""

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from pfrp.altretrieval import (
    Retrieval,
    cosine_scores,
    criterion_scores,
    resolve_criterion,
    retrieval_from_scores,
)
from pfrp.config import PfrpConfig
from pfrp.errors import DataError, NumericError, PfrpError, ShapeError, StageError
from pfrp.gmb import check_encoder, load_bank
from pfrp.localmodels import build_local_predictor, load_local, local_from_dict
from pfrp.nn import (
    MlpGrads,
    adam_from_dict,
    adam_step,
    adam_to_dict,
    init_adam,
    init_mlp,
    load_model,
    mlp_backward,
    mlp_forward,
    model_from_dict,
    model_to_dict,
    softmax,
    softmax_backward,
)
from pfrp.pcl import encode
from pfrp.series import stack_windows
from pfrp.utils import atomic_write_text, format_vector

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


@dataclass
class PfrpPrediction:
    """Every intermediate of one forward pass"""
    indices: np.ndarray
    raw_weights: np.ndarray
    confidences: np.ndarray
    mod_weights: np.ndarray
    y1_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    fusion: tuple
    y: np.ndarray

    @property
    def w1(self):
        return self.fusion[0]


@dataclass
class PfrpComponents:
    encoder: object
    bank: object
    confidence_gate: object
    output_gate: object
    fusion: object
    local: Optional[object]
    top_k: int
    horizon: int
    criterion: str = "feature_cosine"
    use_confidence_gate: bool = True
    use_output_gate: bool = True
    use_local_model: bool = True
    train_local: bool = True

    @property
    def lookback(self):
        return self.bank.lookback

    def trainable_models(self):
        """Named models updated by stage-2 training under the active ablations"""
        models = {}
        if self.use_confidence_gate:
            models["confidence_gate"] = self.confidence_gate
        if self.use_output_gate:
            models["output_gate"] = self.output_gate
        if self.use_local_model:
            models["fusion"] = self.fusion
            if self.train_local:
                for name, model in self.local.models().items():
                    models[f"local.{name}"] = model
        return models

    def parameter_count(self):
        total = 0
        if self.use_confidence_gate:
            total += self.confidence_gate.parameter_count()
        if self.use_output_gate:
            total += self.output_gate.parameter_count()
        if self.use_local_model:
            total += self.fusion.parameter_count() + self.local.parameter_count()
        return total


def init_components(encoder, bank, config: PfrpConfig, local=None):
    """Fresh stage-2 parameters; output gate and fusion heads start at zero"""
    L, H, k = bank.lookback, config.horizon, config.top_k
    if H > bank.horizon:
        raise DataError(f"serving horizon {H} exceeds bank horizon {bank.horizon}")
    if not 1 <= k <= bank.size:
        raise DataError(f"top_k must lie in [1, {bank.size}], got {k}")
    if encoder.input_dim != L or encoder.output_dim != bank.feature_dim:
        raise ShapeError("encoder dimensions do not match the bank")
    check_encoder(bank, encoder)

    rng = np.random.default_rng(config.seed)
    confidence_gate = init_mlp([L + H] + list(config.confidence_hidden) + [1], rng, output_activation="sigmoid")
    output_gate = init_mlp([L] + list(config.output_hidden) + [2 * H], rng, zero_output=True)
    fusion = init_mlp([k] + list(config.fusion_hidden) + [2], rng, zero_output=True)
    if local is None:
        local = build_local_predictor(config.local_kind, L, H, rng, config.kernel_size)
    return PfrpComponents(
        encoder=encoder,
        bank=bank,
        confidence_gate=confidence_gate,
        output_gate=output_gate,
        fusion=fusion,
        local=local,
        top_k=k,
        horizon=H,
        criterion=resolve_criterion(config.retrieval),
        use_confidence_gate=not config.no_confidence_gate,
        use_output_gate=not config.no_output_gate,
        use_local_model=not config.no_local_model,
        train_local=config.pretrained_local is None,
    )


@contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except (PfrpError, ValueError) as e:
        raise StageError(name, e) from e


def retrieve_topk(bank, eps, k, horizon=None, exclude=None) -> Retrieval:
    """Top-k bank entries by cosine similarity, most similar first"""
    scores = cosine_scores(bank, eps)
    return retrieval_from_scores("feature_cosine", bank, scores, k, horizon or bank.horizon, exclude)


def confidence_gate(gate, x, values):
    """p_i = sigmoid(MLP([x; y_i])) for each retrieved horizon, evaluated as one batch"""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    inputs = np.hstack([np.broadcast_to(x, (values.shape[0], x.size)), values])
    p, _ = mlp_forward(gate, inputs)
    return p[:, 0]


def modulate_weights(raw_weights, confidences):
    """softmax(w * p)"""
    w = np.asarray(raw_weights, dtype=np.float64)
    p = np.asarray(confidences, dtype=np.float64)
    if w.shape != p.shape:
        raise ShapeError(f"weights {w.shape} and confidences {p.shape} differ in shape")
    return softmax(w * p)


def global_prediction(mod_weights, values, output_gate, x):
    """Weighted sum of retrieved horizons, then the output gate's scale and shift"""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    w = np.asarray(mod_weights, dtype=np.float64)
    if w.shape != (values.shape[0],):
        raise ShapeError("one modulated weight per retrieved value is required")
    y1_bar = w @ values
    H = values.shape[1]
    if output_gate is None:
        return y1_bar, np.ones(H), np.zeros(H), y1_bar.copy()
    if output_gate.output_dim != 2 * H:
        raise ShapeError(f"output gate emits {output_gate.output_dim} values, need {2 * H}")
    g, _ = mlp_forward(output_gate, x)
    alpha = 1.0 + g[0, :H]
    beta = g[0, H:]
    return y1_bar, alpha, beta, alpha * y1_bar + beta


def dynamic_fusion(fusion, mod_weights, y1, y2):
    """(w1, w2) = softmax(MLP(w_bar)); y = w1 y1 + w2 y2"""
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape:
        raise ShapeError(f"y1 {y1.shape} and y2 {y2.shape} differ in shape")
    logits, _ = mlp_forward(fusion, mod_weights)
    w1, w2 = softmax(logits[0])
    return float(w1), float(w2), w1 * y1 + w2 * y2


@dataclass
class _Trace:
    X: np.ndarray
    indices: np.ndarray
    sims: np.ndarray
    values: np.ndarray
    confidences: np.ndarray
    mod_weights: np.ndarray
    y1_bar: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    fusion_weights: np.ndarray
    y: np.ndarray
    caches: Dict[str, object] = field(default_factory=dict)


def _retrieve_batch(components, X, excludes=None):
    B, k, H, bank = X.shape[0], components.top_k, components.horizon, components.bank
    indices = np.empty((B, k), dtype=np.int64)
    sims = np.empty((B, k))
    values = np.empty((B, k, H))
    if components.criterion == "feature_cosine":
        features = encode(components.encoder, X)
    for b in range(B):
        if components.criterion == "feature_cosine":
            scores = cosine_scores(bank, features[b])
        else:
            scores = criterion_scores(components.criterion, bank, X[b])
        exclude = None if excludes is None else excludes[b]
        r = retrieval_from_scores(components.criterion, bank, scores, k, H, exclude)
        indices[b], sims[b], values[b] = r.indices, r.similarities, r.values
    return indices, sims, values


def _forward_batch(components, X, excludes=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != components.lookback:
        raise ShapeError(f"expected lookback windows of length {components.lookback}, got shape {X.shape}")
    B, k, H = X.shape[0], components.top_k, components.horizon
    caches = {}

    with _stage("retrieve"):
        indices, sims, values = _retrieve_batch(components, X, excludes)

    with _stage("confidence_gate"):
        if components.use_confidence_gate:
            inputs = np.concatenate([np.repeat(X[:, None, :], k, axis=1), values], axis=2).reshape(B * k, -1)
            p, caches["confidence_gate"] = mlp_forward(components.confidence_gate, inputs)
            confidences = p.reshape(B, k)
        else:
            confidences = np.ones((B, k))

    with _stage("modulate_weights"):
        mod_weights = softmax(sims * confidences, axis=1)

    with _stage("global_prediction"):
        y1_bar = np.einsum("bk,bkh->bh", mod_weights, values)
        if components.use_output_gate:
            g, caches["output_gate"] = mlp_forward(components.output_gate, X)
            alpha = 1.0 + g[:, :H]
            beta = g[:, H:]
            y1 = alpha * y1_bar + beta
        else:
            alpha, beta, y1 = np.ones((B, H)), np.zeros((B, H)), y1_bar.copy()

    with _stage("local_model"):
        if components.use_local_model:
            y2, caches["local"] = components.local.forward(X)
        else:
            y2 = np.zeros((B, H))

    with _stage("dynamic_fusion"):
        if components.use_local_model:
            logits, caches["fusion"] = mlp_forward(components.fusion, mod_weights)
            fusion_weights = softmax(logits, axis=1)
            y = fusion_weights[:, :1] * y1 + fusion_weights[:, 1:] * y2
        else:
            # Fusion bypassed: the global branch is the forecast
            fusion_weights = np.tile([1.0, 0.0], (B, 1))
            y = y1.copy()

    return _Trace(X, indices, sims, values, confidences, mod_weights, y1_bar, alpha, beta,
                  y1, y2, fusion_weights, y, caches)


def _backward_batch(components, trace, d_y):
    """Gradients of every trainable model for an upstream gradient on y"""
    grads: Dict[str, MlpGrads] = {}
    B, k, H = trace.X.shape[0], components.top_k, components.horizon

    if components.use_local_model:
        wf = trace.fusion_weights
        d_y1 = wf[:, :1] * d_y
        d_y2 = wf[:, 1:] * d_y
        d_wf = np.stack([np.sum(d_y * trace.y1, axis=1), np.sum(d_y * trace.y2, axis=1)], axis=1)
        d_logits = softmax_backward(wf, d_wf, axis=1)
        grads["fusion"], d_mod_from_fusion = mlp_backward(components.fusion, trace.caches["fusion"], d_logits)
        if components.train_local:
            for name, g in components.local.backward(trace.caches["local"], d_y2).items():
                grads[f"local.{name}"] = g
    else:
        d_y1 = d_y
        d_mod_from_fusion = np.zeros((B, k))

    if components.use_output_gate:
        d_alpha = d_y1 * trace.y1_bar
        d_beta = d_y1
        d_y1_bar = d_y1 * trace.alpha
        grads["output_gate"], _ = mlp_backward(
            components.output_gate, trace.caches["output_gate"], np.hstack([d_alpha, d_beta]))
    else:
        d_y1_bar = d_y1

    if components.use_confidence_gate:
        d_mod = np.einsum("bh,bkh->bk", d_y1_bar, trace.values) + d_mod_from_fusion
        d_products = softmax_backward(trace.mod_weights, d_mod, axis=1)
        d_conf = (d_products * trace.sims).reshape(B * k, 1)
        grads["confidence_gate"], _ = mlp_backward(
            components.confidence_gate, trace.caches["confidence_gate"], d_conf)
    return grads


def _records(trace):
    return [
        PfrpPrediction(
            indices=trace.indices[b], raw_weights=trace.sims[b], confidences=trace.confidences[b],
            mod_weights=trace.mod_weights[b], y1_bar=trace.y1_bar[b], alpha=trace.alpha[b], beta=trace.beta[b],
            y1=trace.y1[b], y2=trace.y2[b],
            fusion=(float(trace.fusion_weights[b, 0]), float(trace.fusion_weights[b, 1])), y=trace.y[b],
        )
        for b in range(trace.X.shape[0])
    ]


def pfrp_forward(components, x):
    """Full forward pass for one lookback window"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("pfrp_forward takes a single lookback vector")
    return _records(_forward_batch(components, x[None, :]))[0]


def predict_batch(components, X, batch_size=1024):
    """Forward passes for many windows, returned as PfrpPrediction records"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    records = []
    for lo in range(0, X.shape[0], batch_size):
        records.extend(_records(_forward_batch(components, X[lo:lo + batch_size])))
    return records


def pfrp_loss_and_grads(components, X, Y, excludes=None):
    """Mean squared error of the fused forecast and its gradients"""
    trace = _forward_batch(components, X, excludes)
    diff = trace.y - np.asarray(Y, dtype=np.float64)
    loss = float(np.mean(diff ** 2))
    return loss, _backward_batch(components, trace, 2.0 * diff / diff.size)


def local_loss_and_grads(local, X, Y):
    pred, cache = local.forward(X)
    diff = pred - np.asarray(Y, dtype=np.float64)
    return float(np.mean(diff ** 2)), local.backward(cache, 2.0 * diff / diff.size)


@dataclass
class TrainState:
    """Adam state per trainable model plus completed epochs, for resuming"""
    optimizers: Dict[str, object] = field(default_factory=dict)
    epochs_done: int = 0

    @property
    def step(self):
        return max((s.step for s in self.optimizers.values()), default=0)

    def to_dict(self):
        return {"epochs_done": self.epochs_done,
                "optimizers": {k: adam_to_dict(v) for k, v in self.optimizers.items()}}

    @classmethod
    def from_dict(cls, data, models):
        return cls({k: adam_from_dict(v, models[k]) for k, v in data["optimizers"].items() if k in models},
                   data["epochs_done"])


@dataclass
class TrainingResult:
    loss_curve: List[float] = field(default_factory=list)
    val_curve: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    state: TrainState = field(default_factory=TrainState)


def _copy_params(dst, src):
    for a, b in zip(dst.weights + dst.biases, src.weights + src.biases):
        a[...] = b
    dst.version += 1


def _fit(models, loss_fn, X, Y, config, val_fn=None, state=None, progress=False, label="pfrp"):
    """Shared Adam loop with seeded shuffles and validation early stopping"""
    N = X.shape[0]
    state = state or TrainState()
    for name, model in models.items():
        state.optimizers.setdefault(name, init_adam(model, config.lr))
    result = TrainingResult(state=state)
    best_val, best_params, stale = np.inf, None, 0
    first = state.epochs_done

    for epoch in tqdm(range(first, first + config.epochs), desc=label, disable=not progress):
        order = np.random.default_rng([config.seed, epoch]).permutation(N)
        losses = []
        for lo in range(0, N, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = loss_fn(X[idx], Y[idx], idx)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite {label} loss in epoch {epoch + 1}")
            losses.append(loss)
            for name, model in models.items():
                adam_step(model, grads[name], state.optimizers[name])
        state.epochs_done = epoch + 1
        result.loss_curve.append(float(np.mean(losses)))

        if val_fn is None:
            logger.info("%s epoch %d train loss %.6f", label, epoch + 1, result.loss_curve[-1])
            continue
        val_loss = val_fn()
        result.val_curve.append(val_loss)
        logger.info("%s epoch %d train loss %.6f val loss %.6f", label, epoch + 1, result.loss_curve[-1], val_loss)
        if val_loss < best_val:
            best_val, stale, result.best_epoch = val_loss, 0, epoch + 1
            best_params = {name: m.copy() for name, m in models.items()}
        else:
            stale += 1
            if config.patience > 0 and stale >= config.patience:
                logger.info("%s early stop after epoch %d (best %d)", label, epoch + 1, result.best_epoch)
                break

    if best_params is not None:
        for name, model in models.items():
            _copy_params(model, best_params[name])
    return result


def _check_samples(samples, lookback, horizon):
    if not samples:
        raise DataError("training set is empty")
    X, Y, starts = stack_windows(samples)
    if X.shape[1] != lookback or Y.shape[1] != horizon:
        raise ShapeError(f"samples are ({X.shape[1]}, {Y.shape[1]}), model expects ({lookback}, {horizon})")
    return X, Y, starts


def _self_exclusions(components, starts):
    """Bank index of each training window's own entry (None if it is not a medoid)"""
    if components.top_k >= components.bank.size:
        return [None] * len(starts)
    lookup = {int(s): i for i, s in enumerate(components.bank.source_indices)}
    return [lookup.get(int(s)) for s in starts]


def train_pfrp(train_samples, components, config: PfrpConfig, val_samples=None, state=None, progress=False):
    """Jointly train gates, fusion and local model with Adam on the L2 loss"""
    X, Y, starts = _check_samples(train_samples, components.lookback, components.horizon)
    excludes = _self_exclusions(components, starts)
    models = components.trainable_models()

    def loss_fn(Xb, Yb, idx):
        return pfrp_loss_and_grads(components, Xb, Yb, [excludes[i] for i in idx])

    val_fn = None
    if val_samples:
        Xv, Yv, _ = _check_samples(val_samples, components.lookback, components.horizon)

        def val_fn():
            preds = np.concatenate([_forward_batch(components, Xv[lo:lo + 1024]).y
                                    for lo in range(0, Xv.shape[0], 1024)])
            return float(np.mean((preds - Yv) ** 2))

    return _fit(models, loss_fn, X, Y, config, val_fn, state, progress, label="pfrp")


def train_local(train_samples, local, config: PfrpConfig, val_samples=None, progress=False):
    """Train a local model alone under the same optimizer settings (baseline)"""
    lookback = next(iter(local.models().values())).input_dim
    X, Y, _ = _check_samples(train_samples, lookback, config.horizon)
    models = local.models()

    def loss_fn(Xb, Yb, idx):
        return local_loss_and_grads(local, Xb, Yb)

    val_fn = None
    if val_samples:
        Xv, Yv, _ = _check_samples(val_samples, lookback, config.horizon)

        def val_fn():
            return float(np.mean((local.predict(Xv) - Yv) ** 2))

    return _fit(models, loss_fn, X, Y, config, val_fn, None, progress, label="local")


def predictions_to_frame(records, y_true, starts):
    """One row per window: start, y_true, y1, y2, y and w1"""
    return pd.DataFrame({
        "window": np.arange(len(records)),
        "start_index": np.asarray(starts, dtype=np.int64),
        "w1": [r.fusion[0] for r in records],
        "y_true": [format_vector(t) for t in y_true],
        "y1": [format_vector(r.y1) for r in records],
        "y2": [format_vector(r.y2) for r in records],
        "y": [format_vector(r.y) for r in records],
    })


def save_checkpoint(directory, components, config: PfrpConfig, encoder_path, bank_path,
                    state=None, baseline=None):
    """Manifest JSON plus one JSON per stage-2 model; stage-1 files are referenced"""
    directory = Path(directory)
    files = {
        "confidence_gate": "confidence_gate.json",
        "output_gate": "output_gate.json",
        "fusion": "fusion.json",
        "local": "local.json",
    }
    atomic_write_text(directory / files["confidence_gate"],
                      json.dumps(model_to_dict(components.confidence_gate, "confidence_gate"), sort_keys=True))
    atomic_write_text(directory / files["output_gate"],
                      json.dumps(model_to_dict(components.output_gate, "output_gate"), sort_keys=True))
    atomic_write_text(directory / files["fusion"],
                      json.dumps(model_to_dict(components.fusion, "fusion"), sort_keys=True))
    atomic_write_text(directory / files["local"], json.dumps(components.local.to_dict(), sort_keys=True))
    if baseline is not None:
        files["baseline"] = "baseline.json"
        atomic_write_text(directory / files["baseline"], json.dumps(baseline.to_dict(), sort_keys=True))
    if state is not None:
        files["optimizer"] = "optimizer.json"
        atomic_write_text(directory / files["optimizer"], json.dumps(state.to_dict(), sort_keys=True))

    manifest = {
        "version": MANIFEST_VERSION,
        "encoder": os.path.relpath(Path(encoder_path).resolve(), directory.resolve()),
        "bank": os.path.relpath(Path(bank_path).resolve(), directory.resolve()),
        "files": files,
        "config": json.loads(config.model_dump_json()),
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return directory / "manifest.json"


@dataclass
class LoadedCheckpoint:
    components: PfrpComponents
    config: PfrpConfig
    state: Optional[TrainState]
    baseline: Optional[object]
    encoder_path: Path
    bank_path: Path


def load_checkpoint(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json" if directory.is_dir() else directory
    directory = manifest_path.parent
    if not manifest_path.exists():
        raise DataError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported checkpoint manifest version {manifest.get('version')}")
    config = PfrpConfig.model_validate(manifest["config"])
    files = manifest["files"]

    def read(name):
        return json.loads((directory / files[name]).read_text(encoding="utf-8"))

    encoder_path = (directory / manifest["encoder"]).resolve()
    bank_path = (directory / manifest["bank"]).resolve()
    encoder = load_model(encoder_path, expected_kind="encoder")
    bank = load_bank(bank_path)
    check_encoder(bank, encoder)
    local = local_from_dict(read("local"))
    components = PfrpComponents(
        encoder=encoder,
        bank=bank,
        confidence_gate=model_from_dict(read("confidence_gate"), "confidence_gate"),
        output_gate=model_from_dict(read("output_gate"), "output_gate"),
        fusion=model_from_dict(read("fusion"), "fusion"),
        local=local,
        top_k=config.top_k,
        horizon=config.horizon,
        criterion=resolve_criterion(config.retrieval),
        use_confidence_gate=not config.no_confidence_gate,
        use_output_gate=not config.no_output_gate,
        use_local_model=not config.no_local_model,
        train_local=config.pretrained_local is None,
    )
    state = TrainState.from_dict(read("optimizer"), components.trainable_models()) if "optimizer" in files else None
    baseline = local_from_dict(read("baseline")) if "baseline" in files else None
    return LoadedCheckpoint(components, config, state, baseline, encoder_path, bank_path)


def load_pretrained_local(path, lookback, horizon):
    """Frozen local model for the pretrained-local option"""
    local = load_local(path)
    model = next(iter(local.models().values()))
    if model.input_dim != lookback or model.output_dim != horizon:
        raise ShapeError(f"pretrained local model maps {model.input_dim}->{model.output_dim}, "
                         f"need {lookback}->{horizon}")
    return local
