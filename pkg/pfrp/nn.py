"""
Dense neural-network substrate - MLP forward/backward, softmax/sigmoid,
Adam optimizer, deterministic initialization and JSON checkpoints.

Everything runs in float64 on numpy arrays; layer weights are stored
(d_out, d_in) so a layer computes a @ W.T + b on a batch of rows.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.special import expit
from scipy.special import softmax as _softmax

from pfrp.errors import DataError, NumericError, ShapeError, StaleCacheError
from pfrp.utils import atomic_write_text

CHECKPOINT_VERSION = 1
HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")
SIGMOID_EPS = 1e-12


def softmax(v, axis=-1):
    """Max-subtracted softmax along an axis"""
    return _softmax(np.asarray(v, dtype=np.float64), axis=axis)


def sigmoid(x):
    """Logistic function kept inside the open interval (0, 1)"""
    return np.clip(expit(np.asarray(x, dtype=np.float64)), SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def softmax_backward(probs, upstream, axis=-1):
    """Vector-Jacobian product of softmax given its output"""
    return probs * (upstream - np.sum(probs * upstream, axis=axis, keepdims=True))


@dataclass(eq=False)
class MlpModel:
    """Layer dims plus per-layer weights (d_m x d_{m-1}) and biases"""
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ShapeError(f"layer_dims needs at least two positive entries, got {self.layer_dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise DataError(f"unknown hidden activation '{self.hidden_activation}'")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise DataError(f"unknown output activation '{self.output_activation}'")
        if len(self.weights) != self.n_layers or len(self.biases) != self.n_layers:
            raise ShapeError("weights/biases count does not match layer_dims")
        for m, (W, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[m + 1], self.layer_dims[m])
            if W.shape != expected or b.shape != (expected[0],):
                raise ShapeError(f"layer {m}: expected W{expected} and b({expected[0]},), got W{W.shape} b{b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {m} has non-finite parameters")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def parameter_count(self):
        return int(sum(W.size + b.size for W, b in zip(self.weights, self.biases)))

    def copy(self):
        return MlpModel(list(self.layer_dims), [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.hidden_activation, self.output_activation)

    def allclose(self, other, atol=0.0):
        return self.layer_dims == other.layer_dims and all(
            np.allclose(a, b, rtol=0.0, atol=atol)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class MlpCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    model_id: int
    version: int


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, model):
        return cls([np.zeros_like(W) for W in model.weights], [np.zeros_like(b) for b in model.biases])

    def add_(self, other):
        for a, b in zip(self.weights + self.biases, other.weights + other.biases):
            a += b
        return self

    def flat(self):
        return np.concatenate([g.ravel() for g in self.weights + self.biases])


def init_mlp(layer_dims, rng, output_activation="identity", zero_output=False):
    """He-uniform weights, zero biases; zero_output zeroes the final layer entirely"""
    weights, biases = [], []
    n_layers = len(layer_dims) - 1
    for m in range(n_layers):
        fan_in, fan_out = int(layer_dims[m]), int(layer_dims[m + 1])
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if zero_output and m == n_layers - 1:
            W = np.zeros((fan_out, fan_in))
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return MlpModel(list(layer_dims), weights, biases, "relu", output_activation)


def zero_mlp(layer_dims, output_activation="identity"):
    """Model with every parameter set to zero"""
    return MlpModel(
        list(layer_dims),
        [np.zeros((layer_dims[m + 1], layer_dims[m])) for m in range(len(layer_dims) - 1)],
        [np.zeros(layer_dims[m + 1]) for m in range(len(layer_dims) - 1)],
        "relu",
        output_activation,
    )


def mlp_forward(model, batch):
    """Forward a B x d0 batch; returns (B x dM outputs, cache for backward)"""
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ShapeError(f"expected batch width {model.input_dim}, got shape {a.shape}")
    inputs, pre = [], []
    for m, (W, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ W.T + b
        pre.append(z)
        if m < model.n_layers - 1:
            a = np.maximum(z, 0.0)
        elif model.output_activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
    return a, MlpCache(inputs, pre, a, id(model), model.version)


def mlp_backward(model, cache, upstream):
    """Parameter gradients and input gradient for an upstream gradient on the outputs"""
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache does not belong to the current model parameters")
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.output.shape}")
    if model.output_activation == "sigmoid":
        g = g * cache.output * (1.0 - cache.output)

    dW = [None] * model.n_layers
    db = [None] * model.n_layers
    for m in reversed(range(model.n_layers)):
        dW[m] = g.T @ cache.inputs[m]
        db[m] = g.sum(axis=0)
        g_in = g @ model.weights[m]
        if m > 0:
            g = g_in * (cache.pre_activations[m - 1] > 0.0)
    return MlpGrads(dW, db), g_in


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None


def init_adam(model, lr):
    if lr <= 0:
        raise DataError("learning rate must be positive")
    params = model.weights + model.biases
    return AdamState(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(model, grads, state):
    """Bias-corrected Adam update applied in place; bumps the model version"""
    params = model.weights + model.biases
    flat_grads = grads.weights + grads.biases
    if len(flat_grads) != len(params) or any(g.shape != p.shape for g, p in zip(flat_grads, params)):
        raise ShapeError("gradient shapes do not match model parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, flat_grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    model.version += 1
    return model, state


def model_to_dict(model, kind="mlp"):
    """Versioned JSON-ready form; weights flattened row-major"""
    return {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "layer_dims": list(model.layer_dims),
        "activations": {"hidden": model.hidden_activation, "output": model.output_activation},
        "weights": [W.ravel(order="C").tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(data, expected_kind=None):
    if data.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported model checkpoint version {data.get('version')}")
    if expected_kind is not None and data.get("kind") != expected_kind:
        raise DataError(f"expected a '{expected_kind}' checkpoint, got '{data.get('kind')}'")
    dims = data["layer_dims"]
    weights = [np.array(w, dtype=np.float64).reshape(dims[m + 1], dims[m]) for m, w in enumerate(data["weights"])]
    biases = [np.array(b, dtype=np.float64) for b in data["biases"]]
    return MlpModel(dims, weights, biases, data["activations"]["hidden"], data["activations"]["output"])


def adam_to_dict(state):
    return {
        "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step,
        "m": [a.ravel().tolist() for a in state.m],
        "v": [a.ravel().tolist() for a in state.v],
    }


def adam_from_dict(data, model):
    shapes = [p.shape for p in model.weights + model.biases]
    return AdamState(
        lr=data["lr"], beta1=data["beta1"], beta2=data["beta2"], eps=data["eps"], step=data["step"],
        m=[np.array(a, dtype=np.float64).reshape(s) for a, s in zip(data["m"], shapes)],
        v=[np.array(a, dtype=np.float64).reshape(s) for a, s in zip(data["v"], shapes)],
    )


def save_model(path, model, kind="mlp"):
    return atomic_write_text(path, json.dumps(model_to_dict(model, kind), sort_keys=True))


def load_model(path, expected_kind=None):
    path = Path(path)
    if not path.exists():
        raise DataError(f"model checkpoint not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt model checkpoint {path}: {e}") from e
    return model_from_dict(data, expected_kind)
