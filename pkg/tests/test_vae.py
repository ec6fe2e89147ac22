import numpy as np
import pytest

from fieldgen.autodiff import Tensor, grad_check, precision
from fieldgen.config import VaeConfig
from fieldgen.errors import DimensionError
from fieldgen.vae import VAE, kl_divergence, pretrain_vae, reconstruction_l1, reparameterize


def _vae(base=4, latent=6, seed=0):
    return VAE(VaeConfig(base_width=base, latent_channels=latent), np.random.default_rng(seed))


@pytest.mark.parametrize("hw,latent", [((64, 64), 64), ((32, 48), 8), ((16, 8), 5)])
def test_encode_decode_shapes(hw, latent):
    vae = _vae(base=4, latent=latent)
    x = np.random.default_rng(1).random((3,) + hw)
    mu, logvar = vae.encode(x)
    assert mu.shape == logvar.shape == (latent, hw[0] // 8, hw[1] // 8)
    assert vae.decode(mu).shape == (3,) + hw


def test_batched_shapes():
    vae = _vae()
    mu, _ = vae.encode(np.zeros((2, 3, 16, 16)))
    assert mu.shape == (2, 6, 2, 2)
    assert vae.decode(mu).shape == (2, 3, 16, 16)


def test_indivisible_extent():
    with pytest.raises(DimensionError):
        _vae().encode(np.zeros((3, 20, 16)))


def test_wrong_channel_count():
    with pytest.raises(DimensionError):
        _vae().encode(np.zeros((4, 16, 16)))


def test_encode_deterministic():
    vae = _vae()
    x = np.random.default_rng(2).random((3, 16, 16))
    a, b = vae.encode(x), vae.encode(x)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_decode_range():
    vae = _vae()
    z = np.random.default_rng(3).normal(0, 10, size=(6, 4, 4))
    out = vae.decode(z).data
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_reparameterize_cases():
    mu = np.arange(6.0).reshape(1, 2, 3)
    np.testing.assert_array_equal(reparameterize(mu, np.zeros_like(mu), np.zeros_like(mu)).data, mu)
    np.testing.assert_allclose(reparameterize(mu, np.zeros_like(mu), np.ones_like(mu)).data, mu + 1)


def test_reparameterize_shape_mismatch():
    with pytest.raises(DimensionError):
        reparameterize(np.zeros(3), np.zeros(3), np.zeros(4))


def test_reparameterize_monte_carlo_mean():
    rng = np.random.default_rng(4)
    mu = rng.normal(size=5)
    logvar = rng.normal(size=5)
    noise = rng.standard_normal((10_000, 5))
    with precision(np.float64):
        z = reparameterize(np.broadcast_to(mu, noise.shape), np.broadcast_to(logvar, noise.shape), noise).data
    sigma = np.exp(logvar / 2)
    assert (np.abs(z.mean(axis=0) - mu) <= 3 * sigma / 100).all()


def test_kl_cases():
    assert float(kl_divergence(np.zeros((2, 3)), np.zeros((2, 3))).data) == 0.0
    assert float(kl_divergence(np.ones(1), np.zeros(1)).data) == pytest.approx(0.5)


def test_kl_formula_oracle():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(3, 2, 2, 2))
    lv = rng.normal(scale=0.5, size=(3, 2, 2, 2))
    with precision(np.float64):
        got = float(kl_divergence(mu, lv).data)
    want = 0.5 * np.sum(mu**2 + np.exp(lv) - 1 - lv) / 3
    assert abs(got - want) <= 1e-6


def test_kl_non_negative():
    rng = np.random.default_rng(6)
    for _ in range(20):
        mu, lv = rng.normal(size=(2, 8)), rng.normal(scale=2, size=(2, 8))
        assert float(kl_divergence(mu, lv).data) >= 0


def test_composite_gradient():
    vae = _vae(base=2, latent=2)
    rng = np.random.default_rng(7)
    x = rng.random((1, 3, 8, 8))
    noise = rng.standard_normal((1, 2, 1, 1))

    def f():
        mu, lv = vae.encode(Tensor(x))
        out = vae.decode(reparameterize(mu, lv, noise))
        return (out * out).sum() + kl_divergence(mu, lv)

    assert grad_check(f, vae.parameters(), max_coords=6) <= 1e-3


def _toy_fields(n=32, size=16, seed=8):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        fx, fy, ph = rng.uniform(1, 3), rng.uniform(1, 3), rng.uniform(0, 6.28)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * (fx * xs + fy * ys) + ph)
        out.append(np.broadcast_to(img, (3, size, size)))
    return np.array(out, dtype=np.float32)


def test_training_halves_reconstruction_error():
    imgs = _toy_fields()
    vae = _vae(base=8, latent=8, seed=9)
    before = reconstruction_l1(vae, imgs)
    pretrain_vae(vae, imgs, epochs=40, lr=2e-3, batch_size=8, kl_weight=1e-4, rng=np.random.default_rng(0))
    after = reconstruction_l1(vae, imgs)
    assert after <= 0.5 * before, (before, after)
