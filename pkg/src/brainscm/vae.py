"""Conditional image mechanism: a VAE with two binary latent resolutions, a
normal latent refined by one affine autoregressive posterior flow, channel
attention driven by the conditioning covariates, and a per-pixel Laplace
likelihood.

The image's background noise splits into a non-invertible part (the latent
code) and an invertible residual: x = loc(z, c) + scale(z, c) * eps. Holding
(z, eps) fixed while changing c is what produces counterfactual images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

LOG2 = math.log(2.0)


@dataclass
class VaeConfig:
    """Architecture sizes. ``flat_dim`` is the flattened bottleneck width."""

    image_size: int = 128
    channels: int = 1
    k: int = 100          # normal latent width
    m: int = 4            # channels of the coarse binary latent
    n: int = 1            # channels of the fine binary latent
    temperature: float = 1.0 / 3.0
    scale_min: float = 1e-3
    stage_channels: tuple[int, int, int, int] = (32, 64, 96, 128)
    cond_dim: int = 4

    def __post_init__(self):
        if self.image_size % 16 != 0:
            raise ConfigurationError("image size must be divisible by 16")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")

    @property
    def flat_dim(self) -> int:
        side = self.image_size // 16
        return self.stage_channels[-1] * side * side

    @property
    def z0_size(self) -> int:
        return self.image_size // 2

    @property
    def z1_size(self) -> int:
        return self.image_size // 8

    @classmethod
    def from_preset(cls, name: str) -> "VaeConfig":
        presets = {
            "small-128": dict(image_size=128, k=100, m=4, n=1,
                              stage_channels=(32, 64, 96, 128)),
            "large-224": dict(image_size=224, k=120, m=8, n=2,
                              stage_channels=(32, 64, 96, 128)),
            "desk-64": dict(image_size=64, k=16, m=4, n=1,
                            stage_channels=(16, 32, 48, 64)),
        }
        if name not in presets:
            raise ConfigurationError(f"unknown preset {name!r}")
        return cls(**presets[name])


@dataclass
class LatentCode:
    """Hierarchical code: two binary maps, one real vector, conditioning."""

    z0: torch.Tensor          # (B, n, H/2, W/2), values in {0, 1}
    z1: torch.Tensor          # (B, m, H/8, W/8), values in {0, 1}
    z2: torch.Tensor          # (B, k)
    c: torch.Tensor | None = None  # (B, cond_dim), normalized


@dataclass
class ImageExogenous:
    """Image background noise: latent code plus the invertible residual."""

    z: LatentCode
    eps: torch.Tensor         # (B, channels, H, W)


@dataclass
class DecoderOutput:
    loc: torch.Tensor
    scale: torch.Tensor


@dataclass
class EncoderOutput:
    z2_mean: torch.Tensor
    z2_scale: torch.Tensor
    iaf_context: torch.Tensor
    z0_logits: torch.Tensor
    z1_logits: torch.Tensor


def sample_binary(logits: torch.Tensor, temperature: float, hard: bool = True,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Relaxed Bernoulli draw with a straight-through hard threshold.

    In hard mode the forward value is exactly {0, 1} while gradients follow
    the relaxed sample.
    """
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype,
                   device=logits.device).clamp(1e-7, 1 - 1e-7)
    noise = torch.log(u) - torch.log1p(-u)
    soft = torch.sigmoid((logits + noise) / temperature)
    if not hard:
        return soft
    hard_sample = (soft > 0.5).to(logits.dtype)
    # (soft - soft.detach()) is exactly zero forward, so values stay hard,
    # while the backward pass follows the relaxed sample
    return hard_sample + (soft - soft.detach())


def kl_binary(logits: torch.Tensor) -> torch.Tensor:
    """KL(Bernoulli(sigmoid(logits)) || Bernoulli(0.5)), summed over the array."""
    p = torch.sigmoid(logits)
    entropy_terms = p * F.logsigmoid(logits) + (1 - p) * F.logsigmoid(-logits)
    return (LOG2 + entropy_terms).sum()


def laplace_log_likelihood(x: torch.Tensor, out: DecoderOutput) -> torch.Tensor:
    """Sum over pixels of log Laplace(x | loc, scale); batched inputs keep
    the batch dimension."""
    if x.shape != out.loc.shape:
        raise ConfigurationError(
            f"image shape {tuple(x.shape)} != decoder shape {tuple(out.loc.shape)}")
    ll = -torch.log(2.0 * out.scale) - (x - out.loc).abs() / out.scale
    return ll.flatten(1).sum(-1) if x.ndim == 4 else ll.sum()


class MaskedLinear(nn.Linear):
    """Linear layer with a fixed binary connectivity mask."""

    def __init__(self, in_features, out_features, mask):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask)

    def forward(self, x):
        return F.linear(x, self.weight * self.mask, self.bias)


class AffineIaf(nn.Module):
    """Single affine inverse-autoregressive step z = z_base * sigma + mu.

    mu_i and sigma_i depend only on z_base_{<i} and the context, so the
    Jacobian is triangular with log-determinant sum(log sigma). Zero-output
    initialization makes the flow the exact identity.
    """

    def __init__(self, dim: int, context_dim: int, hidden: int | None = None,
                 identity_init: bool = False):
        super().__init__()
        self.dim = dim
        hidden = hidden or max(2 * dim, 64)
        degrees_in = torch.arange(1, dim + 1)
        degrees_hidden = (torch.arange(hidden) % max(dim - 1, 1)) + 1
        mask_in = (degrees_hidden.unsqueeze(-1) >= degrees_in.unsqueeze(0)).float()
        mask_out = (degrees_in.unsqueeze(-1) > degrees_hidden.unsqueeze(0)).float()
        self.input_layer = MaskedLinear(dim, hidden, mask_in)
        self.context_layer = nn.Linear(context_dim, hidden)
        self.shift_layer = MaskedLinear(hidden, dim, mask_out)
        self.log_scale_layer = MaskedLinear(hidden, dim, mask_out)
        # near-identity by default so gradients still reach the inner layers;
        # exact identity on request
        std = 0.0 if identity_init else 0.01
        for layer in (self.shift_layer, self.log_scale_layer):
            nn.init.normal_(layer.weight, std=std) if std else \
                nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def _params(self, z_base, context):
        h = torch.tanh(self.input_layer(z_base) + self.context_layer(context))
        shift = self.shift_layer(h)
        log_scale = self.log_scale_layer(h).clamp(-6.0, 6.0)
        return shift, log_scale

    def forward(self, z_base, context):
        shift, log_scale = self._params(z_base, context)
        z = z_base * torch.exp(log_scale) + shift
        return z, log_scale.sum(-1)

    def inverse(self, z, context):
        """Sequential solve; used for checks, not on the training path."""
        z_base = torch.zeros_like(z)
        for i in range(self.dim):
            shift, log_scale = self._params(z_base, context)
            z_base = z_base.clone()
            z_base[..., i] = (z[..., i] - shift[..., i]) \
                * torch.exp(-log_scale[..., i])
        _, log_scale = self._params(z_base, context)
        return z_base, -log_scale.sum(-1)


class ChannelAttention(nn.Module):
    """Squeeze-and-excite gate whose excitation input is the conditioning
    vector rather than pooled features."""

    def __init__(self, cond_dim: int, channels: int, hidden: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cond_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, channels),
        )

    def forward(self, features, c):
        # gates start near 0.5; the factor 2 keeps the block ~identity at init
        gate = torch.sigmoid(self.net(c))
        return features * gate.unsqueeze(-1).unsqueeze(-1) * 2.0


def _down_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.SiLU(),
    )


def _coord_grid(size: int, device, dtype) -> torch.Tensor:
    """Constant (2, H, W) map of normalized pixel coordinates."""
    axis = torch.linspace(-1.0, 1.0, size, device=device, dtype=dtype)
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    return torch.stack([xs, ys])


class _UpBlock(nn.Module):
    """Upsampling block. Coordinate channels plus a spatial broadcast of the
    conditioning vector let the convolution stack express position-dependent
    responses to the covariates (the channel gates alone cannot place
    covariate-driven structure)."""

    def __init__(self, cin, cout, cond_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(cin + 2 + cond_dim, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.attention = ChannelAttention(cond_dim, cout)

    def forward(self, h, c):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        batch, size = h.shape[0], h.shape[-1]
        coords = _coord_grid(size, h.device, h.dtype)
        coords = coords.unsqueeze(0).expand(batch, -1, -1, -1)
        c_map = c.unsqueeze(-1).unsqueeze(-1).expand(-1, -1, size, size)
        h = F.silu(self.conv1(torch.cat([h, coords, c_map], dim=1)))
        h = F.silu(self.conv2(h))
        return self.attention(h, c)


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.stage_channels
        self.stage1 = _down_block(cfg.channels, c1)
        self.stage2 = _down_block(c1, c2)
        self.stage3 = _down_block(c2, c3)
        self.stage4 = _down_block(c3, c4)
        self.z0_head = nn.Conv2d(c1, cfg.n, 1)
        self.z1_head = nn.Conv2d(c3, cfg.m, 1)
        self.mean_head = nn.Linear(cfg.flat_dim + cfg.cond_dim, cfg.k)
        self.log_scale_head = nn.Linear(cfg.flat_dim + cfg.cond_dim, cfg.k)
        self.context_head = nn.Linear(cfg.flat_dim + cfg.cond_dim, cfg.k)
        # start with a clearly non-degenerate posterior width
        nn.init.constant_(self.log_scale_head.bias, math.log(0.7))

    def forward(self, x, c):
        h1 = self.stage1(x)
        h3 = self.stage3(self.stage2(h1))
        h4 = self.stage4(h3)
        flat = torch.cat([h4.flatten(1), c], dim=1)
        return EncoderOutput(
            z2_mean=self.mean_head(flat),
            z2_scale=self.log_scale_head(flat).clamp(-6, 4).exp(),
            iaf_context=self.context_head(flat),
            z0_logits=self.z0_head(h1),
            z1_logits=self.z1_head(h3),
        )


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.stage_channels
        self.cfg = cfg
        side = cfg.image_size // 16
        self.fc = nn.Linear(cfg.k + cfg.cond_dim, c4 * side * side)
        self.up1 = _UpBlock(c4, c3, cfg.cond_dim)            # H/16 -> H/8
        self.merge_z1 = nn.Conv2d(c3 + cfg.m, c3, 3, padding=1)
        self.up2 = _UpBlock(c3, c2, cfg.cond_dim)            # H/8 -> H/4
        self.up3 = _UpBlock(c2, c1, cfg.cond_dim)            # H/4 -> H/2
        self.merge_z0 = nn.Conv2d(c1 + cfg.n, c1, 3, padding=1)
        self.up4 = _UpBlock(c1, c1, cfg.cond_dim)            # H/2 -> H
        self.head = nn.Conv2d(c1, 2 * cfg.channels, 3, padding=1)

    def forward(self, z: LatentCode) -> DecoderOutput:
        cfg = self.cfg
        if z.c is None:
            raise ConfigurationError("latent code is missing its conditioning")
        side = cfg.image_size // 16
        z_c = torch.cat([z.z2, z.c], dim=1)
        h = self.fc(z_c).view(-1, cfg.stage_channels[-1], side, side)
        h = self.up1(h, z.c)
        h = F.silu(self.merge_z1(torch.cat([h, z.z1], dim=1)))
        h = self.up2(h, z.c)
        h = self.up3(h, z.c)
        h = F.silu(self.merge_z0(torch.cat([h, z.z0], dim=1)))
        h = self.up4(h, z.c)
        out = self.head(h)
        loc, raw_scale = out.chunk(2, dim=1)
        scale = cfg.scale_min + F.softplus(raw_scale + _SCALE_BIAS)
        return DecoderOutput(loc=loc, scale=scale)


# softplus offset so the initial decoder scale is a permissive ~0.2
_SCALE_BIAS = math.log(math.expm1(0.2))


class ConditionalVae(nn.Module):
    """Image mechanism. Raw covariate conditioning (n, v, b, l) is
    standardized by stored statistics before entering the networks."""

    cond_vars = ("n", "v", "b", "l")

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.posterior_flow = AffineIaf(cfg.k, context_dim=cfg.k)
        self.register_buffer("c_loc", torch.zeros(cfg.cond_dim))
        self.register_buffer("c_scale", torch.ones(cfg.cond_dim))
        self.initialized = True

    def set_cond_stats(self, loc, scale) -> None:
        self.c_loc.copy_(torch.as_tensor(loc, dtype=torch.float32))
        self.c_scale.copy_(
            torch.as_tensor(scale, dtype=torch.float32).clamp_min(1e-3))

    def normalize_c(self, c: torch.Tensor) -> torch.Tensor:
        return (c - self.c_loc) / self.c_scale

    def _check_image(self, x: torch.Tensor) -> None:
        expect = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if tuple(x.shape[-3:]) != expect:
            raise ConfigurationError(
                f"image shape {tuple(x.shape)} does not match configured {expect}")

    def encode(self, x: torch.Tensor, c: torch.Tensor) -> EncoderOutput:
        """``c`` is raw (unnormalized) conditioning, shape (B, cond_dim)."""
        self._check_image(x)
        if c.shape[-1] != self.cfg.cond_dim:
            raise ConfigurationError(
                f"conditioning length {c.shape[-1]} != {self.cfg.cond_dim}")
        return self.encoder(x, self.normalize_c(c))

    def decode(self, z: LatentCode) -> DecoderOutput:
        """``z.c`` must already be normalized (as produced by this class)."""
        return self.decoder(z)

    def elbo_terms(self, x, c_raw, generator=None):
        """One stochastic pass; returns the likelihood and KL pieces."""
        enc = self.encode(x, c_raw)
        noise = torch.randn(enc.z2_mean.shape, generator=generator,
                            dtype=enc.z2_mean.dtype)
        z2_base = enc.z2_mean + enc.z2_scale * noise
        z2, log_det = self.posterior_flow(z2_base, enc.iaf_context)
        # single-sample KL(q(z2|x,c) || N(0, I)) through the flow
        log_q = (-0.5 * noise.pow(2) - 0.5 * math.log(2 * math.pi)
                 - enc.z2_scale.log()).sum(-1) - log_det
        log_p = (-0.5 * z2.pow(2) - 0.5 * math.log(2 * math.pi)).sum(-1)
        kl_z2 = log_q - log_p
        z0 = sample_binary(enc.z0_logits, self.cfg.temperature, hard=True,
                           generator=generator)
        z1 = sample_binary(enc.z1_logits, self.cfg.temperature, hard=True,
                           generator=generator)
        code = LatentCode(z0=z0, z1=z1, z2=z2, c=self.normalize_c(c_raw))
        out = self.decode(code)
        ll = laplace_log_likelihood(x, out)
        kl_z0 = kl_binary(enc.z0_logits) / x.shape[0]
        kl_z1 = kl_binary(enc.z1_logits) / x.shape[0]
        return {"log_likelihood": ll.mean(), "kl_z0": kl_z0, "kl_z1": kl_z1,
                "kl_z2": kl_z2.mean()}

    # ------------------------------------------------------------------
    # exogenous-noise interface used by the causal graph

    @torch.no_grad()
    def abduct_code(self, x: torch.Tensor, c_raw: torch.Tensor) -> ImageExogenous:
        """Deterministic abduction: posterior means and hard thresholds."""
        enc = self.encode(x, c_raw)
        z2, _ = self.posterior_flow(enc.z2_mean, enc.iaf_context)
        z0 = (enc.z0_logits > 0).float()
        z1 = (enc.z1_logits > 0).float()
        code = LatentCode(z0=z0, z1=z1, z2=z2, c=self.normalize_c(c_raw))
        out = self.decode(code)
        eps = (x - out.loc) / out.scale
        return ImageExogenous(z=LatentCode(z0=z0, z1=z1, z2=z2, c=None), eps=eps)

    @torch.no_grad()
    def sampled_abduct_code(self, x, c_raw,
                            generator: torch.Generator) -> ImageExogenous:
        """Stochastic abduction variant: posterior samples instead of means."""
        enc = self.encode(x, c_raw)
        noise = torch.randn(enc.z2_mean.shape, generator=generator,
                            dtype=enc.z2_mean.dtype)
        z2, _ = self.posterior_flow(enc.z2_mean + enc.z2_scale * noise,
                                    enc.iaf_context)
        z0 = sample_binary(enc.z0_logits, self.cfg.temperature, hard=True,
                           generator=generator).detach()
        z1 = sample_binary(enc.z1_logits, self.cfg.temperature, hard=True,
                           generator=generator).detach()
        code = LatentCode(z0=z0, z1=z1, z2=z2, c=self.normalize_c(c_raw))
        out = self.decode(code)
        eps = (x - out.loc) / out.scale
        return ImageExogenous(z=LatentCode(z0=z0, z1=z1, z2=z2, c=None), eps=eps)

    @torch.no_grad()
    def decode_code(self, exo: ImageExogenous, c_raw: torch.Tensor) -> torch.Tensor:
        code = LatentCode(z0=exo.z.z0, z1=exo.z.z1, z2=exo.z.z2,
                          c=self.normalize_c(c_raw))
        out = self.decode(code)
        return out.loc + out.scale * exo.eps

    @torch.no_grad()
    def sample_code(self, generator: torch.Generator, batch: int = 1) -> ImageExogenous:
        cfg = self.cfg
        z0 = (torch.rand(batch, cfg.n, cfg.z0_size, cfg.z0_size,
                         generator=generator) < 0.5).float()
        z1 = (torch.rand(batch, cfg.m, cfg.z1_size, cfg.z1_size,
                         generator=generator) < 0.5).float()
        z2 = torch.randn(batch, cfg.k, generator=generator)
        # Laplace residual via inverse CDF of uniform draws
        u = torch.rand(batch, cfg.channels, cfg.image_size, cfg.image_size,
                       generator=generator) - 0.5
        eps = -u.sign() * torch.log1p(-2 * u.abs()).clamp(-30, 30)
        return ImageExogenous(z=LatentCode(z0=z0, z1=z1, z2=z2, c=None), eps=eps)


class ImageMechanism:
    """numpy-facing adapter installed as the graph's image mechanism."""

    def __init__(self, vae: ConditionalVae):
        self.vae = vae
        self.n_parents = len(self.vae.cond_vars)

    @property
    def cond_vars(self):
        return self.vae.cond_vars

    @property
    def initialized(self) -> bool:
        return True

    def _c_tensor(self, c_vector) -> torch.Tensor:
        return torch.as_tensor(np.asarray(c_vector, dtype=np.float32)).reshape(1, -1)

    def _x_tensor(self, image) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))
        if x.ndim == 2:
            x = x.unsqueeze(0)
        return x.unsqueeze(0)  # (1, C, H, W)

    def abduct(self, image, c_vector,
               generator: torch.Generator | None = None) -> ImageExogenous:
        self.vae.eval()
        x, c = self._x_tensor(image), self._c_tensor(c_vector)
        if generator is not None:
            return self.vae.sampled_abduct_code(x, c, generator)
        return self.vae.abduct_code(x, c)

    def decode_exogenous(self, exo: ImageExogenous, c_vector) -> np.ndarray:
        self.vae.eval()
        out = self.vae.decode_code(exo, self._c_tensor(c_vector))
        return out[0, 0].cpu().numpy() if self.vae.cfg.channels == 1 \
            else out[0].cpu().numpy()

    def sample_exogenous(self, generator: torch.Generator) -> ImageExogenous:
        self.vae.eval()
        return self.vae.sample_code(generator, batch=1)


def apply_weight_norm(module: nn.Module) -> nn.Module:
    """Weight-normalize every convolution in the module tree."""
    for child in module.modules():
        if isinstance(child, (nn.Conv2d, nn.ConvTranspose2d)):
            if not hasattr(child, "parametrizations"):
                nn.utils.parametrizations.weight_norm(child)
    return module
