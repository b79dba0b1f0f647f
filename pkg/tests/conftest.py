import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from ispdata import apply_isp, synth_raw
from model import CodecModel
from schemas import IspConfig, NetConfig
from tensor import Tensor


def tiny_config(**overrides) -> NetConfig:
    values = dict(
        latent_channels=4,
        hyper_channels=2,
        hidden_channels=6,
        residual_blocks=1,
        context_steps=2,
        prior_layers=3,
        prior_width=3,
    )
    values.update(overrides)
    return NetConfig(**values)


@pytest.fixture(scope="session")
def net_config() -> NetConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def model(net_config) -> CodecModel:
    m = CodecModel.initialize(net_config, seed=7, gumbel_seed=1234)
    m.rebuild_tables()
    return m


def make_pair(seed: int, width: int = 32, height: int = 32, recipe: str = "perlin_texture"):
    x = synth_raw(seed, width, height, recipe)
    return x, apply_isp(x, IspConfig())


@pytest.fixture
def pair():
    return make_pair(3, 64, 32)


# ─── Finite differences ───────────────────────────────────────────
FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(fn, arrays: list[np.ndarray], index: int, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar fn(*arrays) w.r.t. arrays[index]."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = base[idx]
        base[idx] = old + step
        plus = fn(*arrays)
        base[idx] = old - step
        minus = fn(*arrays)
        base[idx] = old
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def check_gradients(build, *arrays: np.ndarray, rtol: float = FD_RTOL, atol: float = 1e-7):
    """
    `build(*tensors)` returns a Tensor; its sum weighted by fixed random
    coefficients is differentiated analytically and numerically.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    weight_rng = np.random.default_rng(99)
    weights = {}

    def scalar(*arrs):
        out = build(*[Tensor(a) for a in arrs]).data
        w = weights.setdefault("w", weight_rng.normal(size=out.shape))
        return float((out * w).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    scalar(*arrays)
    loss = (out * Tensor(weights["w"])).sum()
    loss.backward()
    for i, t in enumerate(tensors):
        expected = numeric_grad(scalar, arrays, i)
        np.testing.assert_allclose(t.grad, expected, rtol=rtol, atol=atol)
