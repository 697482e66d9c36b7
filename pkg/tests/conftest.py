import numpy as np
import pytest

from pfrp.config import PfrpConfig
from pfrp.forecaster import init_components
from pfrp.gmb import build_bank
from pfrp.nn import init_mlp
from pfrp.series import IndexRange, make_windows


def central_difference(loss_fn, arrays, h=1e-6):
    """Numeric gradient of loss_fn() with respect to every entry of each array (perturbed in place)"""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            plus = loss_fn()
            arr[idx] = orig - h
            minus = loss_fn()
            arr[idx] = orig
            g[idx] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel_err():
    return relative_error


@pytest.fixture
def tiny_series():
    t = np.arange(80)
    noise = np.random.default_rng(1).normal(0.0, 0.1, size=t.size)
    return np.sin(2.0 * np.pi * t / 12.0) + noise


class Tiny:
    """L=8, H=4, d=4, K=6, k=2 stage-2 setup"""
    L, H, H_bank, d, K, k = 8, 4, 6, 4, 6, 2


@pytest.fixture
def tiny(tiny_series):
    setup = Tiny()
    rng = np.random.default_rng(0)
    setup.encoder = init_mlp([setup.L, 16, setup.d], rng)
    setup.bank_samples = make_windows(tiny_series, IndexRange(0, 80), setup.L, setup.H_bank)
    setup.bank = build_bank(setup.encoder, setup.bank_samples, setup.K, setup.H_bank, seed=0, store_raw_x=True)
    setup.samples = make_windows(tiny_series, IndexRange(0, 80), setup.L, setup.H)
    setup.config = PfrpConfig(
        top_k=setup.k, horizon=setup.H, confidence_hidden=[8], output_hidden=[8], fusion_hidden=[4],
        batch_size=16, epochs=2, patience=0, seed=0,
    )
    setup.components = init_components(setup.encoder, setup.bank, setup.config)
    return setup
