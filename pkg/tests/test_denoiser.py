import itertools
import math

import numpy as np
import pytest

from diffcd.denoiser import Denoiser, FeaturePyramid, UNetConfig, init_params, time_embedding, unet_forward
from diffcd.diffusion import denoise_loss, make_linear_schedule
from diffcd.errors import ConfigError, ContractError, ShapeError
from diffcd.numerics import Rng, Tensor, gaussian

from helpers import param_grad_error

TINY = UNetConfig(base_channels=2, depth=1, time_embed_dim=4, norm_groups=1)


def test_time_embedding_k0():
    e = time_embedding(0, 16)
    assert np.array_equal(e[0::2], np.zeros(8)) and np.array_equal(e[1::2], np.ones(8))


def test_time_embedding_dim2():
    np.testing.assert_allclose(time_embedding(1, 2), [0.841471, 0.540302], atol=1e-6)


def test_time_embedding_formula():
    dim, k = 8, 37
    expected = []
    for i in range(dim // 2):
        angle = k / 10000 ** (2 * i / dim)
        expected += [math.sin(angle), math.cos(angle)]
    np.testing.assert_allclose(time_embedding(k, dim), expected, rtol=1e-14)


@pytest.mark.parametrize("dim", [16, 32])
def test_time_embedding_no_collisions(dim):
    table = time_embedding(np.arange(1, 101), dim)
    closest = min(np.abs(table[i] - table[j]).max() for i, j in itertools.combinations(range(100), 2))
    assert closest > 1e-6


def test_time_embedding_odd_dim():
    with pytest.raises(ConfigError):
        time_embedding(3, 7)


@pytest.mark.parametrize("kwargs", [
    {"depth": 0}, {"time_embed_dim": 5}, {"base_channels": 6, "norm_groups": 4}, {"tap_layers": [2]},
    {"tap_layers": []},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        UNetConfig(**kwargs)


def test_default_shapes():
    model = Denoiser.create(UNetConfig(), Rng(0))
    eps, taps = model.forward(gaussian(Rng(1), [1, 32, 32]), 10)
    assert eps.shape == (1, 32, 32)
    assert taps.extents == [(8, 8), (16, 16)]
    assert taps.channels == [32, 16]


def test_batched_shapes_and_tap_subset():
    cfg = UNetConfig(tap_layers=[1])
    model = Denoiser.create(cfg, Rng(0))
    eps, taps = model.forward(gaussian(Rng(1), [3, 1, 16, 16]), np.array([1, 2, 3]))
    assert eps.shape == (3, 1, 16, 16)
    assert taps.extents == [(8, 8)] and taps.timesteps == (1, 2, 3)


def test_tap_shapes_are_data_independent():
    model = Denoiser.create(UNetConfig(), Rng(0))
    shapes = {tuple(t.shape for t in model.forward(gaussian(Rng(s), [1, 16, 16]), s + 1)[1].levels)
              for s in range(3)}
    assert len(shapes) == 1


def test_zero_params_give_zero_output():
    model = Denoiser.create(UNetConfig(), Rng(0))
    zeros = {k: Tensor(np.zeros(v.shape)) for k, v in model.params.items()}
    eps = unet_forward(model.cfg, zeros, gaussian(Rng(1), [1, 16, 16]), 5)[0]
    assert np.array_equal(eps.data, np.zeros((1, 16, 16)))


@pytest.mark.parametrize("shape", [(1, 30, 32), (2, 32, 32), (32, 32)])
def test_bad_input_shapes(shape):
    model = Denoiser.create(UNetConfig(), Rng(0))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros(shape)), 1)


def test_init_deterministic_and_zero_biases():
    a = init_params(UNetConfig(), Rng(7))
    b = init_params(UNetConfig(), Rng(7))
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
        if name.endswith(".b"):
            assert not a[name].data.any()


def test_he_variance():
    # pooled over a few seeds: a lone 256-weight layer has ~9% sampling error in its variance
    draws = [init_params(UNetConfig(), Rng(seed)) for seed in range(4)]
    checked = 0
    for name, p in draws[0].items():
        if not name.endswith(".w") or p.size < 256:
            continue
        fan_in = int(np.prod(p.shape[1:])) if p.ndim == 4 else p.shape[0]
        var = np.mean([d[name].data.var() for d in draws])
        assert abs(var / (2.0 / fan_in) - 1.0) < 0.2, name
        checked += 1
    assert checked >= 8


def test_pyramid_contract():
    with pytest.raises(ContractError):
        FeaturePyramid([])


def test_default_param_count():
    assert Denoiser.create(UNetConfig(), Rng(0)).num_params() == 59393


def test_denoise_loss_gradient_small_model():
    model = Denoiser.create(TINY, Rng(0))
    assert model.num_params() <= 1000
    s = make_linear_schedule()
    batch = gaussian(Rng(1), [2, 1, 4, 4])

    def loss(params):
        return denoise_loss(Denoiser(TINY, params), batch, Rng(5), s)

    assert param_grad_error(loss, model.params) < 1e-4


def test_training_reduces_loss():
    from diffcd.pipeline import eval_denoise_loss, train_diffusion
    from diffcd.synthdata import SceneConfig, generate_pair

    cfg = SceneConfig(size=16, seed=4)
    images = np.stack([generate_pair(cfg, i).img_a for i in range(64)])
    model = Denoiser.create(UNetConfig(), Rng(0))
    s = make_linear_schedule()
    before = eval_denoise_loss(model, images, s, seed=1)
    train_diffusion(model, images, s, steps=300, batch=16, lr=2e-3, seed=0)
    after = eval_denoise_loss(model, images, s, seed=1)
    assert after <= 0.5 * before
