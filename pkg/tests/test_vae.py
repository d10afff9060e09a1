"""Image-mechanism contracts: shapes, latent samplers, flow, reconstruction."""

import math

import numpy as np
import pytest
import torch

from brainscm.errors import ConfigurationError
from brainscm.vae import (
    AffineIaf,
    ConditionalVae,
    DecoderOutput,
    ImageMechanism,
    LatentCode,
    VaeConfig,
    apply_weight_norm,
    kl_binary,
    laplace_log_likelihood,
    sample_binary,
)


def tiny_vae(seed=0) -> ConditionalVae:
    torch.manual_seed(seed)
    return ConditionalVae(VaeConfig.from_preset("desk-64"))


def random_image(vae, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, vae.cfg.channels, vae.cfg.image_size,
                      vae.cfg.image_size, generator=g)


C_SAMPLE = torch.tensor([[30.0, 25.0, 1300.0, 10.0]])


class TestShapes:
    def test_small_128_preset(self):
        torch.manual_seed(0)
        cfg = VaeConfig.from_preset("small-128")
        assert (cfg.k, cfg.flat_dim, cfg.m, cfg.n) == (100, 8192, 4, 1)
        vae = ConditionalVae(cfg)
        x = torch.zeros(1, 1, 128, 128)
        enc = vae.encode(x, C_SAMPLE)
        assert enc.z2_mean.shape == (1, 100)
        assert enc.z0_logits.shape == (1, 1, 64, 64)
        assert enc.z1_logits.shape == (1, 4, 16, 16)

    def test_large_224_preset(self):
        torch.manual_seed(0)
        cfg = VaeConfig.from_preset("large-224")
        assert (cfg.k, cfg.flat_dim, cfg.m, cfg.n) == (120, 25088, 8, 2)
        vae = ConditionalVae(cfg)
        x = torch.zeros(1, 1, 224, 224)
        enc = vae.encode(x, C_SAMPLE)
        assert enc.z2_mean.shape == (1, 120)
        assert enc.z0_logits.shape == (1, 2, 112, 112)
        assert enc.z1_logits.shape == (1, 8, 28, 28)

    def test_decode_output_matches_input_shape(self):
        vae = tiny_vae()
        exo = vae.sample_code(torch.Generator().manual_seed(2))
        code = LatentCode(z0=exo.z.z0, z1=exo.z.z1, z2=exo.z.z2,
                          c=vae.normalize_c(C_SAMPLE))
        out = vae.decode(code)
        assert out.loc.shape == (1, 1, 64, 64)
        assert out.scale.shape == (1, 1, 64, 64)

    def test_shape_mismatch_rejected(self):
        vae = tiny_vae()
        with pytest.raises(ConfigurationError):
            vae.encode(torch.zeros(1, 1, 32, 32), C_SAMPLE)
        with pytest.raises(ConfigurationError):
            vae.encode(torch.zeros(1, 1, 64, 64), torch.zeros(1, 3))

    def test_encode_deterministic(self):
        vae = tiny_vae()
        x = random_image(vae)
        a = vae.encode(x, C_SAMPLE)
        b = vae.encode(x, C_SAMPLE)
        assert torch.equal(a.z2_mean, b.z2_mean)
        assert torch.equal(a.z0_logits, b.z0_logits)


class TestSampleBinary:
    def test_saturated_logits(self):
        g = torch.Generator().manual_seed(0)
        out = sample_binary(torch.full((1000,), 20.0), 1 / 3, generator=g)
        assert out.mean().item() > 0.999

    def test_zero_logits_mean_half(self):
        g = torch.Generator().manual_seed(1)
        out = sample_binary(torch.zeros(100_000), 1 / 3, generator=g)
        assert out.mean().item() == pytest.approx(0.5, abs=0.01)

    def test_hard_values_are_binary(self):
        g = torch.Generator().manual_seed(2)
        out = sample_binary(torch.randn(1000, generator=g), 1 / 3, generator=g)
        assert set(out.unique().tolist()) <= {0.0, 1.0}

    def test_straight_through_gradient(self):
        logits = torch.randn(50, requires_grad=True)
        g = torch.Generator().manual_seed(3)
        out = sample_binary(logits, 1 / 3, hard=True, generator=g)
        out.sum().backward()
        assert logits.grad is not None
        assert logits.grad.abs().sum().item() > 0

    def test_seeded_determinism(self):
        logits = torch.randn(100)
        a = sample_binary(logits, 0.5, generator=torch.Generator().manual_seed(7))
        b = sample_binary(logits, 0.5, generator=torch.Generator().manual_seed(7))
        assert torch.equal(a, b)


class TestKlBinary:
    def test_zero_logits(self):
        assert kl_binary(torch.zeros(10, 10)).item() == pytest.approx(0.0, abs=1e-9)

    def test_single_unit_value(self):
        logit = math.log(0.9 / 0.1)
        expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        assert kl_binary(torch.tensor([logit])).item() == pytest.approx(
            expected, abs=1e-6)
        assert expected == pytest.approx(0.3681, abs=1e-4)

    def test_nonnegative_for_random_logits(self):
        g = torch.Generator().manual_seed(4)
        logits = 10 * torch.randn(10_000, generator=g)
        per_unit = kl_binary(logits)
        assert per_unit.item() >= 0
        for chunk in logits.split(100):
            assert kl_binary(chunk).item() >= -1e-9


class TestAffineIaf:
    def test_identity_initialization(self):
        flow = AffineIaf(16, context_dim=16, identity_init=True)
        z = torch.randn(4, 16)
        ctx = torch.randn(4, 16)
        with torch.no_grad():
            out, log_det = flow(z, ctx)
        assert torch.equal(out, z)
        assert torch.equal(log_det, torch.zeros(4))

    def _trained_like_flow(self, dim=12, seed=5):
        torch.manual_seed(seed)
        flow = AffineIaf(dim, context_dim=dim)
        with torch.no_grad():
            for layer in (flow.shift_layer, flow.log_scale_layer):
                layer.weight.normal_(0, 0.4)
                layer.bias.normal_(0, 0.2)
        return flow

    def test_numeric_inverse_round_trip(self):
        flow = self._trained_like_flow()
        z_base = torch.randn(8, 12)
        ctx = torch.randn(8, 12)
        z, log_det = flow(z_base, ctx)
        back, inv_log_det = flow.inverse(z, ctx)
        assert (back - z_base).abs().max().item() <= 1e-5
        assert (log_det + inv_log_det).abs().max().item() <= 1e-4

    def test_jacobian_is_triangular(self):
        dim = 10
        flow = self._trained_like_flow(dim=dim).double()
        z = torch.randn(dim, dtype=torch.float64)
        ctx = torch.randn(dim, dtype=torch.float64)
        h = 1e-5
        jac = np.zeros((dim, dim))
        with torch.no_grad():
            for j in range(dim):
                zp, zm = z.clone(), z.clone()
                zp[j] += h
                zm[j] -= h
                fp, _ = flow(zp.unsqueeze(0), ctx.unsqueeze(0))
                fm, _ = flow(zm.unsqueeze(0), ctx.unsqueeze(0))
                jac[:, j] = ((fp - fm) / (2 * h)).squeeze(0).numpy()
        above = np.triu(jac, k=1)
        assert np.abs(above).max() <= 1e-6
        assert np.abs(np.diag(jac)).min() > 0


class TestLaplaceLikelihood:
    def test_at_mode_unit_scale(self):
        x = torch.zeros(1, 1, 8, 8)
        out = DecoderOutput(loc=torch.zeros_like(x), scale=torch.ones_like(x))
        assert laplace_log_likelihood(x, out).item() == pytest.approx(
            -64 * math.log(2), rel=1e-6)

    def test_single_pixel_offset(self):
        x = torch.ones(1, 1, 1, 1)
        out = DecoderOutput(loc=torch.zeros_like(x), scale=torch.ones_like(x))
        assert laplace_log_likelihood(x, out).item() == pytest.approx(
            -math.log(2) - 1.0, rel=1e-6)

    def test_monotone_in_residual(self):
        out = DecoderOutput(loc=torch.zeros(1, 1, 1, 1),
                            scale=torch.ones(1, 1, 1, 1))
        values = [laplace_log_likelihood(torch.full((1, 1, 1, 1), r), out).item()
                  for r in (0.0, 0.5, 1.0, 2.0)]
        assert values == sorted(values, reverse=True)


class TestDecoderContracts:
    def test_scale_floor_respected(self):
        vae = tiny_vae()
        g = torch.Generator().manual_seed(6)
        for _ in range(5):
            exo = vae.sample_code(g)
            code = LatentCode(z0=exo.z.z0, z1=exo.z.z1, z2=exo.z.z2,
                              c=vae.normalize_c(C_SAMPLE))
            out = vae.decode(code)
            assert out.scale.min().item() >= vae.cfg.scale_min

    def test_conditioning_is_live(self):
        vae = tiny_vae(seed=3)
        exo = vae.sample_code(torch.Generator().manual_seed(7))
        out_a = vae.decode(LatentCode(exo.z.z0, exo.z.z1, exo.z.z2,
                                      vae.normalize_c(C_SAMPLE)))
        c_shift = C_SAMPLE + torch.tensor([[5.0, 10.0, -80.0, 25.0]])
        out_b = vae.decode(LatentCode(exo.z.z0, exo.z.z1, exo.z.z2,
                                      vae.normalize_c(c_shift)))
        assert (out_a.loc - out_b.loc).abs().max().item() > 0


class TestAbductionReconstruction:
    def test_reconstruction_identity(self):
        vae = tiny_vae(seed=4)
        mech = ImageMechanism(vae)
        image = random_image(vae, seed=8)[0, 0].numpy()
        c = np.array([30.0, 25.0, 1300.0, 10.0])
        exo = mech.abduct(image, c)
        rebuilt = mech.decode_exogenous(exo, c)
        assert np.abs(rebuilt - image).mean() <= 1e-6

    def test_latents_are_hard(self):
        vae = tiny_vae(seed=5)
        mech = ImageMechanism(vae)
        exo = mech.abduct(random_image(vae, seed=9)[0, 0].numpy(),
                          np.array([1.0, 2.0, 3.0, 4.0]))
        assert set(exo.z.z0.unique().tolist()) <= {0.0, 1.0}
        assert set(exo.z.z1.unique().tolist()) <= {0.0, 1.0}

    def test_elbo_terms_finite_and_kl_nonnegative_binary(self):
        vae = tiny_vae(seed=6)
        x = random_image(vae, seed=10)
        terms = vae.elbo_terms(x, C_SAMPLE,
                               generator=torch.Generator().manual_seed(11))
        for key, value in terms.items():
            assert torch.isfinite(value), key
        assert terms["kl_z0"].item() >= 0
        assert terms["kl_z1"].item() >= 0


class TestGradientFlow:
    def test_every_parameter_group_receives_gradient(self):
        vae = tiny_vae(seed=7)
        apply_weight_norm(vae)
        x = random_image(vae, seed=12).expand(4, -1, -1, -1).contiguous()
        c = C_SAMPLE.expand(4, -1).contiguous()
        terms = vae.elbo_terms(x, c, generator=torch.Generator().manual_seed(13))
        loss = -(terms["log_likelihood"] - terms["kl_z2"]
                 - terms["kl_z1"] - terms["kl_z0"])
        loss.backward()
        missing = [name for name, p in vae.named_parameters()
                   if p.grad is None or p.grad.abs().sum().item() == 0]
        assert missing == []
