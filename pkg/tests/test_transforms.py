import numpy as np
import pytest

from conftest import make_pair, tiny_config
from conv import conv2d, deconv2d
from errors import DomainError, ShapeError
from model import CodecModel
from tensor import Tensor, backward, concat, no_grad
from transforms import NETS, SIGMA_FLOOR, apply_mask, masked_deconv, srgb_condition

FD_STEP = 1e-5


@pytest.fixture
def fresh_model():
    return CodecModel.initialize(tiny_config(), seed=11, gumbel_seed=5)


@pytest.fixture
def small_pair():
    return make_pair(21, 32, 32)


def _check_param_gradients(model, loss_fn, names, samples=3, rtol=1e-4, atol=1e-8):
    model.params.zero_grad()
    backward(loss_fn())
    rng = np.random.default_rng(0)
    for name in names:
        p = model.params[name]
        assert p.grad is not None, f"{name} received no gradient"
        analytic = p.grad.copy()
        for flat in rng.choice(p.size, size=min(samples, p.size), replace=False):
            idx = np.unravel_index(flat, p.shape)
            old = p.data[idx]
            with no_grad():
                p.data[idx] = old + FD_STEP
                plus = loss_fn().item()
                p.data[idx] = old - FD_STEP
                minus = loss_fn().item()
            p.data[idx] = old
            numeric = (plus - minus) / (2 * FD_STEP)
            np.testing.assert_allclose(analytic[idx], numeric, rtol=rtol, atol=atol, err_msg=name)
    model.params.zero_grad()


def _weighted(t: Tensor, seed: int = 1) -> Tensor:
    w = np.random.default_rng(seed).normal(size=t.shape)
    return (t * Tensor(w)).sum()


class TestShapes:
    def test_srgb_condition(self, small_pair):
        _, y = small_pair
        c = srgb_condition(y, 8)
        assert c.shape == (1, 192, 4, 4)
        assert c.data.max() <= 1.0 and c.data.min() >= 0.0

    def test_latent_and_hyper_extents(self, fresh_model, small_pair):
        x, y = small_pair
        with no_grad():
            z = fresh_model.analysis(Tensor(x), y)
            v = fresh_model.hyper_analysis(z, y)
            h = fresh_model.hyper_synthesis(Tensor(np.round(v.data)), y)
            x_hat = fresh_model.synthesis(Tensor(np.round(z.data)), y)
        assert z.shape == (1, 4, 4, 4)
        assert v.shape == (1, 2, 1, 1)
        assert h.shape == (1, 8, 4, 4)
        assert x_hat.shape == x.shape
        assert x_hat.data.min() >= 0.0 and x_hat.data.max() <= 1.0

    def test_gaussian_prior_sigma_floor(self, fresh_model, small_pair):
        x, y = small_pair
        with no_grad():
            z = fresh_model.analysis(Tensor(x), y)
            h = fresh_model.hyper_synthesis(Tensor(np.zeros((1, 2, 1, 1))), y)
            mask = Tensor(np.zeros((1, 1, 4, 4)))
            mu, sigma = fresh_model.step_parameters(z, mask, y, h)
        assert mu.shape == sigma.shape == (1, 4, 4, 4)
        assert sigma.data.min() >= SIGMA_FLOOR

    def test_order_logits_positive(self, fresh_model, small_pair):
        _, y = small_pair
        with no_grad():
            h = fresh_model.hyper_synthesis(Tensor(np.zeros((1, 2, 1, 1))), y)
            m = fresh_model.order_net(y, h)
        assert m.shape == (1, 2, 4, 4)
        assert np.all(m.data > 0)

    def test_mismatched_raw_and_srgb(self, fresh_model, small_pair):
        x, _ = small_pair
        _, y = make_pair(1, 64, 32)
        with pytest.raises(ShapeError):
            fresh_model.analysis(Tensor(x), y)


class TestMaskedDeconv:
    def test_full_mask_is_count_normalised_deconv(self):
        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=(1, 2, 4, 4)))
        w, b = Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(rng.normal(size=3))
        ones = Tensor(np.ones((1, 1, 4, 4)))
        count = deconv2d(ones, Tensor(np.ones((1, 1, 3, 3))), padding=1).data
        expected = deconv2d(z, w, b, padding=1).data / count
        np.testing.assert_allclose(masked_deconv(apply_mask(z, ones), ones, w, b).data, expected, rtol=1e-12)
        assert count[0, 0, 0, 0] == 4 and count[0, 0, 1, 1] == 9

    def test_full_mask_decoder_is_plain_deconv_stack(self, fresh_model, small_pair):
        x, y = small_pair
        cfg, p = fresh_model.config, fresh_model.params
        with no_grad():
            z = Tensor(np.round(fresh_model.analysis(Tensor(x), y).data) + 0.0)
            ones = Tensor(np.ones((1, 1) + z.shape[-2:]))
            out = fresh_model.masked_decoder(apply_mask(z, ones), ones, y).data

            k = p["g_z.mdeconv1.weight"].shape[2]
            count = deconv2d(ones, Tensor(np.ones((1, 1, k, k))), padding=k // 2).clamp_min(1.0)
            h = (deconv2d(z, p["g_z.mdeconv1.weight"], p["g_z.mdeconv1.bias"], padding=k // 2) / count)
            h = h.leaky_relu(cfg.leaky_slope)
            h = (deconv2d(h, p["g_z.mdeconv2.weight"], p["g_z.mdeconv2.bias"], padding=k // 2) / count)
            h = concat([h.leaky_relu(cfg.leaky_slope), srgb_condition(y, cfg.analysis_stride_total)])
            wo = p["g_z.out.weight"]
            expected = conv2d(h, wo, p["g_z.out.bias"], padding=wo.shape[2] // 2, pad_mode="zeros").data
        assert z.shape[-2:] == (4, 4)
        np.testing.assert_array_equal(out, expected)

    def test_empty_mask_gives_bias(self):
        w, b = Tensor(np.ones((2, 3, 3, 3))), Tensor([0.1, 0.2, 0.3])
        zeros = Tensor(np.zeros((1, 1, 4, 4)))
        z = Tensor(np.full((1, 2, 4, 4), 5.0))
        out = masked_deconv(apply_mask(z, zeros), zeros, w, b)
        np.testing.assert_allclose(out.data[0, :, 0, 0], [0.1, 0.2, 0.3])

    def test_soft_mask_rejected_at_inference(self):
        w, b = Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0])
        soft = Tensor(np.full((1, 1, 2, 2), 0.5))
        with pytest.raises(DomainError):
            masked_deconv(soft, soft, w, b, training=False)
        masked_deconv(soft, soft, w, b, training=True)

    def test_apply_mask_normalises_negative_zero(self):
        out = apply_mask(Tensor([-3.0, 2.0]), Tensor([0.0, 1.0])).data
        assert not np.signbit(out[0])


class TestNetworkGradients:
    """Central differences on sampled weights of every network."""

    def test_analysis_and_hyper_analysis(self, fresh_model, small_pair):
        x, y = small_pair

        def loss():
            z = fresh_model.analysis(Tensor(x), y)
            return _weighted(z) + _weighted(fresh_model.hyper_analysis(z, y), seed=2)

        _check_param_gradients(fresh_model, loss, ["g_a.down0.conv1.weight", "g_a.out.weight", "h_a.conv2.weight"])

    def test_synthesis(self, fresh_model, small_pair):
        x, y = small_pair
        z = Tensor(np.random.default_rng(4).normal(size=(1, 4, 4, 4)))
        _check_param_gradients(
            fresh_model,
            lambda: _weighted(fresh_model.synthesis(z, y)),
            ["g_s.in.weight", "g_s.up0.deconv.weight", "g_s.out.bias"],
        )

    def test_hyper_synthesis_prior_and_order(self, fresh_model, small_pair):
        _, y = small_pair
        rng = np.random.default_rng(5)
        v = Tensor(rng.normal(size=(1, 2, 1, 1)))
        z = Tensor(np.round(rng.normal(scale=2.0, size=(1, 4, 4, 4))))
        mask = Tensor(rng.uniform(0.2, 0.8, size=(1, 1, 4, 4)))

        def loss():
            h = fresh_model.hyper_synthesis(v, y)
            mu, sigma = fresh_model.step_parameters(z, mask, y, h, training=True)
            return _weighted(mu) + _weighted(sigma, seed=3) + _weighted(fresh_model.order_net(y, h), seed=4)

        _check_param_gradients(
            fresh_model,
            loss,
            ["h_s.deconv1.weight", "h_s.conv2.weight", "g_z.mdeconv1.weight", "g_z.mdeconv2.weight",
             "g_z.out.weight", "g_c.conv1.weight", "g_c.conv2.bias", "g_m.conv1.weight", "g_m.conv2.weight"],
        )

    def test_every_net_has_parameters(self, fresh_model):
        for net in NETS:
            assert fresh_model.params.group(net), net
