import numpy as np
import pytest

from sdm_policy.diffusion import Normalizer, make_denoiser, make_schedule
from sdm_policy.ndnum import Layer, MlpNet, Rng, make_mlp
from sdm_policy.sdm import DistillConfig, OneStepGenerator
from sdm_policy.tasks import PointMassEnv, default_gmm_spec


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def schedule():
    return make_schedule("linear", 50, 1e-4, 0.2)


@pytest.fixture
def short_schedule():
    return make_schedule("linear", 10, 1e-3, 0.3)


@pytest.fixture
def denoiser(rng):
    """Small conditional denoiser: obs_dim 3, H = 2, A = 2"""
    return make_tiny_denoiser(rng)


@pytest.fixture
def generator(denoiser, short_schedule):
    return OneStepGenerator(denoiser.copy(), short_schedule)


@pytest.fixture
def distill_cfg():
    return DistillConfig(iters=3, batch=8, c=1, log_every=1)


@pytest.fixture
def gmm_spec():
    return default_gmm_spec()


@pytest.fixture
def env():
    return PointMassEnv()


def make_tiny_denoiser(rng, obs_dim=3, horizon=2, action_dim=2, hidden=(8, 8), activation="silu"):
    return make_denoiser(
        obs_dim,
        horizon,
        action_dim,
        rng,
        hidden=hidden,
        activation=activation,
        normalizer=Normalizer(-2.0 * np.ones(action_dim), np.ones(action_dim)),
    )


def make_random_net(rng, sizes, activation="silu"):
    """MLP with non-zero biases so every parameter gradient is exercised"""
    net = make_mlp(sizes, rng, activation)
    layers = [Layer(layer.weight, rng.gaussian(1, len(layer.bias))[0] * 0.1, layer.activation) for layer in net.layers]
    return MlpNet(layers)


def numeric_gradient(f, array, h=1e-6):
    """Central differences of scalar ``f()`` with respect to every entry of ``array``, in place"""
    grad = np.zeros_like(array)
    flat, grad_flat = array.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + h
        upper = f()
        flat[k] = original - h
        lower = f()
        flat[k] = original
        grad_flat[k] = (upper - lower) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-3):
    return np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor))
