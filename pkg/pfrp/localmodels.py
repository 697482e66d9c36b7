"""
Local prediction models behind one predictor interface:
a direct linear map and a decomposition-linear model (moving-average trend
plus seasonal remainder, one affine map per component).
"""

import json
from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from pfrp.errors import DataError, ShapeError
from pfrp.nn import init_mlp, mlp_backward, mlp_forward, model_from_dict, model_to_dict
from pfrp.utils import atomic_write_text

LOCAL_KINDS = ("linear", "dlinear")


def moving_average_decompose(x, kernel):
    """Centered moving average with edge replication; returns (trend, seasonal)"""
    x = np.asarray(x, dtype=np.float64)
    if kernel < 1 or kernel % 2 == 0:
        raise DataError(f"decomposition kernel must be odd, got {kernel}")
    if kernel > x.shape[-1]:
        raise DataError(f"decomposition kernel {kernel} exceeds window length {x.shape[-1]}")
    trend = uniform_filter1d(x, size=kernel, axis=-1, mode="nearest")
    return trend, x - trend


class LocalPredictor(ABC):
    """Maps lookback windows (B x L) to horizons (B x H); trainable through backward()"""
    kind = None

    @abstractmethod
    def forward(self, X):
        """Predictions plus a cache for backward"""

    @abstractmethod
    def backward(self, cache, upstream):
        """Gradients per named model for an upstream gradient on the predictions"""

    @abstractmethod
    def models(self):
        """Named MlpModels holding the parameters"""

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        Y, _ = self.forward(X[None, :] if X.ndim == 1 else X)
        return Y[0] if X.ndim == 1 else Y

    def parameter_count(self):
        return sum(m.parameter_count() for m in self.models().values())

    def to_dict(self):
        return {"kind": self.kind, "models": {k: model_to_dict(m, f"local-{self.kind}") for k, m in self.models().items()}}


class LinearPredictor(LocalPredictor):
    kind = "linear"

    def __init__(self, model):
        if model.n_layers != 1:
            raise ShapeError("linear predictor must be a single affine layer")
        self.model = model

    def forward(self, X):
        return mlp_forward(self.model, X)

    def backward(self, cache, upstream):
        grads, _ = mlp_backward(self.model, cache, upstream)
        return {"linear": grads}

    def models(self):
        return {"linear": self.model}

    def copy(self):
        return LinearPredictor(self.model.copy())


class DLinearPredictor(LocalPredictor):
    """Affine trend and seasonal branches; each keeps its own bias and the two add up to one output bias"""

    kind = "dlinear"

    def __init__(self, trend_model, seasonal_model, kernel_size=25):
        if trend_model.n_layers != 1 or seasonal_model.n_layers != 1:
            raise ShapeError("dlinear branches must be single affine layers")
        if kernel_size > trend_model.input_dim or kernel_size % 2 == 0:
            raise DataError(f"kernel {kernel_size} must be odd and at most the lookback {trend_model.input_dim}")
        self.trend_model = trend_model
        self.seasonal_model = seasonal_model
        self.kernel_size = kernel_size

    def forward(self, X):
        trend, seasonal = moving_average_decompose(X, self.kernel_size)
        yt, ct = mlp_forward(self.trend_model, trend)
        ys, cs = mlp_forward(self.seasonal_model, seasonal)
        return yt + ys, (ct, cs)

    def backward(self, cache, upstream):
        ct, cs = cache
        gt, _ = mlp_backward(self.trend_model, ct, upstream)
        gs, _ = mlp_backward(self.seasonal_model, cs, upstream)
        return {"trend": gt, "seasonal": gs}

    def models(self):
        return {"trend": self.trend_model, "seasonal": self.seasonal_model}

    def copy(self):
        return DLinearPredictor(self.trend_model.copy(), self.seasonal_model.copy(), self.kernel_size)

    def to_dict(self):
        data = super().to_dict()
        data["kernel_size"] = self.kernel_size
        return data


def linear_predict(model, x):
    """y2 = W x + b"""
    return LinearPredictor(model).predict(x)


def dlinear_predict(predictor, x):
    """y2 = W_t trend + W_s seasonal + b, where the single bias b is the sum b_t + b_s of the branch biases"""
    return predictor.predict(x)


def build_local_predictor(kind, lookback, horizon, rng, kernel_size=25):
    if kind == "linear":
        return LinearPredictor(init_mlp([lookback, horizon], rng))
    if kind == "dlinear":
        return DLinearPredictor(init_mlp([lookback, horizon], rng), init_mlp([lookback, horizon], rng), kernel_size)
    raise DataError(f"unknown local model kind '{kind}'; choose one of {LOCAL_KINDS}")


def local_from_dict(data):
    kind = data.get("kind")
    models = {k: model_from_dict(v, f"local-{kind}") for k, v in data["models"].items()}
    if kind == "linear":
        return LinearPredictor(models["linear"])
    if kind == "dlinear":
        return DLinearPredictor(models["trend"], models["seasonal"], data["kernel_size"])
    raise DataError(f"unknown local model kind '{kind}'")


def save_local(path, predictor):
    return atomic_write_text(path, json.dumps(predictor.to_dict(), sort_keys=True))


def load_local(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"local model checkpoint not found: {path}")
    return local_from_dict(json.loads(path.read_text(encoding="utf-8")))
