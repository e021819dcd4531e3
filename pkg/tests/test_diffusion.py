import math

import numpy as np
import pytest
import torch

from vexpress.diffusion import (
    LatentCodec,
    NoiseSchedule,
    TinyAutoencoder,
    ddim_sample,
    ddim_timesteps,
    denoising_loss,
    make_schedule,
    mouth_mask_from_kps,
    q_sample,
)
from vexpress.errors import ConfigurationError, InvalidInputError, ShapeError
from vexpress.geometry import FaceKeypoints


class TestMakeSchedule:
    def test_single_step(self):
        sched = make_schedule(1, 0.5, 0.5)
        assert sched.T == 1
        np.testing.assert_allclose(sched.alpha_bar, [0.5])

    def test_default_reaches_complete_noise(self):
        sched = make_schedule(1000)
        # independent product computation
        beta = np.linspace(1e-4, 0.02, 1000)
        expect = np.prod(1.0 - beta)
        np.testing.assert_allclose(sched.alpha_bar[-1], expect, rtol=1e-12)
        assert sched.alpha_bar[-1] < 1e-4

    def test_strictly_decreasing(self):
        for kind in ("linear", "scaled_linear"):
            sched = make_schedule(50, 0.001, 0.3, kind)
            assert np.all(np.diff(sched.alpha_bar) < 0)
            assert np.all(sched.alpha_bar > 0) and np.all(sched.alpha_bar < 1)

    def test_scaled_linear_sqrt_space(self):
        sched = make_schedule(3, 0.01, 0.09, "scaled_linear")
        np.testing.assert_allclose(sched.beta, [0.01, 0.04, 0.09], rtol=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(T=0),
            dict(T=10, beta_start=0.0),
            dict(T=10, beta_start=0.5, beta_end=0.4),
            dict(T=10, beta_end=1.0),
            dict(T=10, kind="cosine"),
        ],
    )
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ConfigurationError):
            make_schedule(**kwargs)


class TestQSample:
    def sched_with_ab(self, ab):
        return NoiseSchedule(1, np.array([1 - ab]), np.array([ab]))

    def test_no_noise_limit(self):
        z0 = torch.randn(2, 3, 4, 4)
        eps = torch.randn(2, 3, 4, 4)
        out = q_sample(z0, 1, eps, self.sched_with_ab(1.0 - 1e-300))
        torch.testing.assert_close(out, z0, atol=1e-6, rtol=0)

    def test_pure_noise_limit(self):
        z0 = torch.randn(2, 3, 4, 4)
        eps = torch.randn(2, 3, 4, 4)
        out = q_sample(z0, 1, eps, self.sched_with_ab(1e-300))
        torch.testing.assert_close(out, eps, atol=1e-6, rtol=0)

    def test_monte_carlo_variance(self):
        sched = make_schedule(100, 0.002, 0.2, "scaled_linear")
        gen = torch.Generator().manual_seed(0)
        for t in (1, 50, 100):
            z0 = torch.randn(1_000_000, generator=gen)
            eps = torch.randn(1_000_000, generator=gen)
            zt = q_sample(z0, t, eps, sched)
            ab = float(sched.alpha_bar[t - 1])
            expect = ab * 1.0 + (1.0 - ab)
            assert abs(zt.var().item() - expect) / expect < 0.05

    def test_per_sample_t(self):
        sched = make_schedule(10)
        z0 = torch.ones(3, 2, 2, 2, 2)
        eps = torch.zeros_like(z0)
        out = q_sample(z0, torch.tensor([1, 5, 10]), eps, sched)
        for i, t in enumerate((1, 5, 10)):
            expect = math.sqrt(sched.alpha_bar[t - 1])
            torch.testing.assert_close(
                out[i], torch.full_like(out[i], expect), atol=1e-6, rtol=0
            )

    def test_linearity(self):
        sched = make_schedule(10)
        z0 = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        a = 2.5
        lhs = q_sample(a * z0, 4, a * eps, sched)
        rhs = a * q_sample(z0, 4, eps, sched)
        torch.testing.assert_close(lhs, rhs, atol=1e-12, rtol=0)

    def test_t_out_of_range(self):
        sched = make_schedule(10)
        z = torch.zeros(1, 2, 2)
        with pytest.raises(InvalidInputError):
            q_sample(z, 0, z, sched)
        with pytest.raises(InvalidInputError):
            q_sample(z, 11, z, sched)

    def test_shape_mismatch(self):
        sched = make_schedule(10)
        with pytest.raises(ShapeError):
            q_sample(torch.zeros(2, 2), 1, torch.zeros(3, 2), sched)


class TestMouthMask:
    def test_coincident_eyes_empty(self):
        kps = FaceKeypoints((10, 10), (10, 10), (10, 20))
        mask = mouth_mask_from_kps(kps, (32, 32)).mask
        assert mask.sum() == 0

    def test_reference_rectangle(self):
        # eyes (8,8),(24,8), nose (16,20): IOD=16, center (16, 29.6),
        # x in [8, 24), y in [25.6, 33.6) clipped to the 32-row canvas
        kps = FaceKeypoints((8, 8), (24, 8), (16, 20))
        mask = mouth_mask_from_kps(kps, (32, 32), downscale=1).mask[0, 0]
        expect = torch.zeros(32, 32)
        for y in range(32):
            for x in range(32):
                if 8.0 <= x + 0.5 < 24.0 and 25.6 <= y + 0.5 < 33.6:
                    expect[y, x] = 1.0
        assert torch.equal(mask, expect)
        assert expect.sum() > 0

    def test_binary_and_shape(self):
        kps = FaceKeypoints((12, 10), (20, 11), (16, 18))
        mask = mouth_mask_from_kps(kps, (16, 16), downscale=2).mask
        assert mask.shape == (1, 1, 16, 16)
        assert set(mask.unique().tolist()) <= {0.0, 1.0}

    def test_downscale_maps_geometry(self):
        kps = FaceKeypoints((16, 16), (48, 16), (32, 40))
        full = mouth_mask_from_kps(kps, (64, 64), downscale=1).mask
        quarter = mouth_mask_from_kps(kps, (16, 16), downscale=4).mask
        ys, xs = torch.where(full[0, 0] > 0)
        ys2, xs2 = torch.where(quarter[0, 0] > 0)
        assert abs(ys.float().mean() / 4 - ys2.float().mean()) < 1.5
        assert abs(xs.float().mean() / 4 - xs2.float().mean()) < 1.5


class TestDenoisingLoss:
    def test_empty_mask_is_mse(self):
        pred = torch.randn(2, 3, 4, 8, 8)
        eps = torch.randn(2, 3, 4, 8, 8)
        mask = torch.zeros(3, 1, 8, 8)
        loss = denoising_loss(pred, eps, mask, w_mouth=100)
        torch.testing.assert_close(loss, ((pred - eps) ** 2).mean())

    def test_full_mask_is_mse(self):
        pred = torch.randn(2, 3, 4, 8, 8)
        eps = torch.randn(2, 3, 4, 8, 8)
        mask = torch.ones(3, 1, 8, 8)
        loss = denoising_loss(pred, eps, mask, w_mouth=100)
        torch.testing.assert_close(loss, ((pred - eps) ** 2).mean())

    def test_half_mask_closed_form(self):
        # uniform error magnitude: any weighting gives e^2
        pred = torch.full((1, 1, 1, 2, 2), 0.7)
        eps = torch.zeros(1, 1, 1, 2, 2)
        mask = torch.zeros(1, 1, 2, 2)
        mask[0, 0, :1] = 1.0
        loss = denoising_loss(pred, eps, mask, w_mouth=100)
        torch.testing.assert_close(loss, torch.tensor(0.49), atol=1e-6, rtol=0)
        # distinct in/out errors: (100 e_in^2 + e_out^2) / 101
        e_in, e_out = 0.3, 0.9
        pred2 = torch.zeros(1, 1, 1, 2, 2)
        pred2[0, 0, 0, 0] = e_in  # masked row
        pred2[0, 0, 0, 1] = e_out
        eps2 = torch.zeros_like(pred2)
        loss2 = denoising_loss(pred2, eps2, mask, w_mouth=100)
        expect = (100 * 2 * e_in**2 / 2 + 2 * e_out**2 / 2) / (100 + 1)
        torch.testing.assert_close(loss2, torch.tensor(expect), atol=1e-6, rtol=0)

    def test_constant_error_invariant_to_weight(self):
        pred = torch.full((1, 2, 3, 4, 4), 1.3)
        eps = torch.zeros_like(pred)
        mask = (torch.rand(2, 1, 4, 4) > 0.5).float()
        for w in (1.0, 10.0, 100.0, 1000.0):
            loss = denoising_loss(pred, eps, mask, w_mouth=w)
            torch.testing.assert_close(loss, torch.tensor(1.69), atol=1e-5, rtol=0)

    def test_nonnegative_zero_iff_equal(self):
        x = torch.randn(2, 2, 2, 4, 4)
        mask = torch.ones(2, 1, 4, 4)
        assert denoising_loss(x, x, mask).item() == 0.0
        assert denoising_loss(x, x + 0.1, mask).item() > 0.0

    def test_no_mask_plain_mse(self):
        pred = torch.randn(2, 3, 4, 4)
        eps = torch.randn(2, 3, 4, 4)
        torch.testing.assert_close(denoising_loss(pred, eps), ((pred - eps) ** 2).mean())


class TestDDIM:
    def test_planted_oracle_inversion(self):
        sched = make_schedule(10, 0.02, 0.3, "scaled_linear")
        gen = torch.Generator().manual_seed(1)
        z0 = torch.randn(1, 4, 8, 8, generator=gen)
        eps = torch.randn(1, 4, 8, 8, generator=gen)
        z_T = q_sample(z0, sched.T, eps, sched)
        out = ddim_sample(lambda z, t: eps, z_T, sched, num_steps=sched.T)
        assert (out - z0).abs().max().item() < 1e-4

    def test_determinism(self):
        sched = make_schedule(50)
        model = lambda z, t: 0.1 * z
        z_T = torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(3))
        a = ddim_sample(model, z_T.clone(), sched, 10)
        b = ddim_sample(model, z_T.clone(), sched, 10)
        assert torch.equal(a, b)

    def test_single_step_formula(self):
        sched = make_schedule(100, 0.002, 0.2, "scaled_linear")
        gen = torch.Generator().manual_seed(5)
        z_T = torch.randn(1, 3, 4, 4, generator=gen)
        eps_hat = torch.randn(1, 3, 4, 4, generator=gen)
        out = ddim_sample(lambda z, t: eps_hat, z_T, sched, num_steps=1)
        ab_T = float(sched.alpha_bar[-1])
        expect = (z_T - math.sqrt(1 - ab_T) * eps_hat) / math.sqrt(ab_T)
        torch.testing.assert_close(out, expect, atol=1e-5, rtol=1e-5)

    def test_timestep_grid(self):
        assert ddim_timesteps(100, 20) == list(range(100, 0, -5))
        assert ddim_timesteps(10, 10) == list(range(10, 0, -1))
        assert ddim_timesteps(7, 1) == [7]

    def test_invalid_steps(self):
        sched = make_schedule(10)
        with pytest.raises(InvalidInputError):
            ddim_sample(lambda z, t: z, torch.zeros(1, 1, 2, 2), sched, 0)
        with pytest.raises(InvalidInputError):
            ddim_timesteps(10, 11)


class TestLatentCodec:
    def test_identity_roundtrip_exact(self):
        codec = LatentCodec("identity", 1)
        image = torch.arange(256, dtype=torch.float32).reshape(1, 4, 8, 8) / 255.0
        back = codec.decode(codec.encode(image))
        assert torch.equal(back.to(torch.float32), image)
        assert torch.equal(back, image.to(torch.float64))

    def test_identity_roundtrip_random_values(self):
        codec = LatentCodec("identity", 1)
        image = torch.rand(2, 3, 8, 8)
        back = codec.decode(codec.encode(image)).to(torch.float32)
        assert torch.equal(back, image)

    def test_half_maps_to_zero(self):
        codec = LatentCodec("identity", 1)
        out = codec.encode(torch.full((1, 3, 8, 8), 0.5))
        assert torch.all(out == 0.0)

    def test_space_to_depth_roundtrip_exact(self):
        codec = LatentCodec("identity", 4)
        image = torch.rand(2, 5, 3, 32, 32)
        lat = codec.encode(image)
        assert lat.shape == (2, 5, 48, 8, 8)
        back = codec.decode(lat).to(torch.float32)
        assert torch.equal(back, image)

    def test_space_to_depth_preserves_values(self):
        codec = LatentCodec("identity", 2)
        image = torch.rand(1, 3, 4, 4)
        lat = codec.encode(image)
        assert lat.shape == (1, 12, 2, 2)
        # multiset of values is preserved under the pixel rearrangement
        a = np.sort((image.double() * 2 - 1).numpy().ravel())
        b = np.sort(lat.numpy().ravel())
        np.testing.assert_array_equal(a, b)

    def test_indivisible_dims_rejected(self):
        codec = LatentCodec("identity", 4)
        with pytest.raises(ConfigurationError):
            codec.encode(torch.rand(1, 3, 30, 32))

    def test_latent_channels(self):
        assert LatentCodec("identity", 1).latent_channels() == 3
        assert LatentCodec("identity", 4).latent_channels() == 48

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            LatentCodec("vae")
        with pytest.raises(ConfigurationError):
            LatentCodec("tiny_autoencoder", 2)  # missing autoencoder

    def test_tiny_autoencoder_shapes(self):
        ae = TinyAutoencoder(3, 4, hidden=8)
        codec = LatentCodec("tiny_autoencoder", 2, ae)
        image = torch.rand(2, 3, 16, 16)
        lat = codec.encode(image)
        assert lat.shape == (2, 4, 8, 8)
        back = codec.decode(lat)
        assert back.shape == image.shape
        assert codec.latent_channels() == 4
