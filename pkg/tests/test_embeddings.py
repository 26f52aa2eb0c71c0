import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raydepth.diffcore import ShapeError
from raydepth.embeddings import (
    FourierConfig,
    ImageEncoder,
    bilinear_sample,
    build_encoder_tokens,
    fourier_encode,
    geometric_embeddings,
    query_embeddings,
)
from raydepth.geometry import PinholeIntrinsics, pixel_grid, rescale_intrinsics, resized_pixel

from conftest import random_intrinsics


def test_default_dim_is_51():
    assert FourierConfig().dim == 51
    assert fourier_encode([0.0, 0.0, 1.0], FourierConfig()).shape == (51,)


def test_zero_bands_is_raw_direction():
    d = np.array([0.6, 0.0, 0.8])
    np.testing.assert_array_equal(fourier_encode(d, FourierConfig(bands=0)), d)


def test_hand_evaluated_layout():
    out = fourier_encode([0.0, 0.0, 1.0], FourierConfig(bands=2, max_res=4))
    np.testing.assert_allclose(out, [0, 0, 1, 0, 0, 1, 1, 0, -1], atol=1e-15)


@pytest.mark.parametrize("F", [0, 2, 4, 8, 16, 32])
def test_dimension_law(F):
    cfg = FourierConfig(bands=F)
    assert cfg.dim == 3 * (F + 1)
    assert fourier_encode([[1.0, 0.0, 0.0]], cfg).shape == (1, 3 * (F + 1))


def test_frequencies_log_spaced():
    f = FourierConfig(bands=16, max_res=64).frequencies
    assert len(f) == 8 and f[0] == 1.0
    assert f[-1] == pytest.approx(32.0)
    np.testing.assert_allclose(np.diff(np.log(f)), np.log(32) / 7)


def test_non_unit_direction_rejected():
    with pytest.raises(ValueError):
        fourier_encode([1.0, 1.0, 1.0], FourierConfig())
    with pytest.raises(ValueError):
        FourierConfig(bands=3)


def test_empty_and_grid_embeddings():
    K = PinholeIntrinsics(50, 50, 3.5, 2.5, 8, 6)
    cfg = FourierConfig()
    assert geometric_embeddings(K, np.zeros(0), np.zeros(0), cfg).shape == (0, 51)
    u, v = pixel_grid(6, 8)
    grid = geometric_embeddings(K, u.reshape(-1), v.reshape(-1), cfg)
    assert grid.shape == (48, 51)
    np.testing.assert_array_equal(grid[9], geometric_embeddings(K, 1.0, 1.0, cfg))


def test_symmetric_pixels_flip_signs():
    K = PinholeIntrinsics(80, 80, 31.5, 23.5, 64, 48)
    cfg = FourierConfig(bands=4, max_res=16)
    a = geometric_embeddings(K, 31.5 + 7, 23.5 + 3, cfg)
    b = geometric_embeddings(K, 31.5 - 7, 23.5 - 3, cfg)
    block = cfg.bands + 1
    half = cfg.bands // 2
    sign = np.ones(3 * block)
    for c in (0, 1):  # x and y blocks: raw and sin entries flip
        sign[c * block : c * block + 1 + half] = -1
    np.testing.assert_allclose(a, sign * b, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_features_bounded(seed):
    rng = np.random.default_rng(seed)
    K = random_intrinsics(rng)
    e = geometric_embeddings(K, rng.uniform(0, K.width, 50), rng.uniform(0, K.height, 50), FourierConfig())
    assert np.all(np.abs(e) <= 1.0)


@given(st.integers(0, 2**32 - 1))
def test_resolution_invariance(seed):
    rng = np.random.default_rng(seed)
    K = random_intrinsics(rng)
    r_w, r_h = rng.uniform(0.25, 1.5, 2)
    u, v = rng.uniform(0, K.width, 20), rng.uniform(0, K.height, 20)
    u2, v2 = resized_pixel(u, v, r_w, r_h)
    cfg = FourierConfig()
    np.testing.assert_allclose(
        geometric_embeddings(rescale_intrinsics(K, r_w, r_h), u2, v2, cfg), geometric_embeddings(K, u, v, cfg), atol=1e-9, rtol=0
    )


def test_pixel_mode_ignores_focal_length():
    cfg = FourierConfig(coords="pixels")
    assert cfg.dim == 34
    a = PinholeIntrinsics(80, 80, 31.5, 23.5, 64, 48)
    b = PinholeIntrinsics(200, 200, 31.5, 23.5, 64, 48)
    np.testing.assert_array_equal(geometric_embeddings(a, [3.0], [4.0], cfg), geometric_embeddings(b, [3.0], [4.0], cfg))
    assert not np.allclose(geometric_embeddings(a, [3.0], [4.0], FourierConfig()), geometric_embeddings(b, [3.0], [4.0], FourierConfig()))


def test_image_encoder_shapes_and_zero_image():
    torch.manual_seed(0)
    enc = ImageEncoder((8, 16, 32))
    assert enc(torch.rand(1, 3, 32, 32)).shape == (1, 56, 8, 8)
    assert enc(torch.rand(2, 3, 48, 64)).shape == (2, 56, 12, 16)
    assert torch.count_nonzero(enc(torch.zeros(1, 3, 32, 32))) == 0
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(enc(x), enc(x.clone()))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 4, 32))
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 1, 32, 32))


def test_bilinear_sample():
    fm = torch.arange(2 * 3 * 4, dtype=torch.float64).reshape(1, 2, 3, 4)
    out = bilinear_sample(fm, torch.tensor([[2.0, 0.5]]), torch.tensor([[1.0, 0.0]]))
    np.testing.assert_array_equal(out[0, 0].numpy(), fm[0, :, 1, 2].numpy())
    np.testing.assert_allclose(out[0, 1].numpy(), (fm[0, :, 0, 0] + fm[0, :, 0, 1]).numpy() / 2)
    const = torch.full((1, 5, 3, 4), 2.5, dtype=torch.float64)
    rnd = torch.rand(1, 7, dtype=torch.float64)
    np.testing.assert_allclose(bilinear_sample(const, rnd * 3, rnd * 2).numpy(), 2.5)


def test_bilinear_linear_along_axis():
    torch.manual_seed(1)
    fm = torch.randn(1, 3, 5, 6, dtype=torch.float64)
    t = torch.linspace(0, 1, 11, dtype=torch.float64)
    x = (2 + t).unsqueeze(0)
    y = torch.full_like(x, 3.0)
    out = bilinear_sample(fm, x, y)[0]
    expected = fm[0, :, 3, 2][None] * (1 - t[:, None]) + fm[0, :, 3, 3][None] * t[:, None]
    np.testing.assert_allclose(out.numpy(), expected.numpy(), atol=1e-14)


def test_encoder_tokens():
    torch.manual_seed(0)
    fm = torch.randn(1, 56, 3, 4)
    K = PinholeIntrinsics(20, 20, 1.5, 1.0, 4, 3)
    u, v = pixel_grid(3, 4)
    tokens = build_encoder_tokens(fm, [K], u.reshape(1, -1), v.reshape(1, -1), FourierConfig())
    assert tokens.shape == (1, 12, 107)
    np.testing.assert_array_equal(tokens[0, :, :56].numpy(), fm[0].reshape(56, -1).T.numpy())
    empty = build_encoder_tokens(fm, [K], np.zeros((1, 0)), np.zeros((1, 0)), FourierConfig())
    assert empty.shape == (1, 0, 107)
    q = query_embeddings([K], u.reshape(1, -1), v.reshape(1, -1), FourierConfig(), torch.float64)
    np.testing.assert_array_equal(q[0].numpy(), geometric_embeddings(K, u.reshape(-1), v.reshape(-1), FourierConfig()))
