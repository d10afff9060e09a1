"""Invertible one-dimensional mechanisms for scalar covariates.

Continuous covariates are modeled with a monotone linear rational spline
acting on standardized base-distribution samples, optionally behind a log
transform so positive quantities stay positive. Discrete root covariates
(sex, slice index) are direct draws from their base distribution. All
mechanisms run in float64; the tight inverse tolerances elsewhere in the
engine depend on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EstimationError, MechanismDomainError

DTYPE = torch.float64

MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-3
MIN_LAMBDA = 0.025
SCALE_MIN = 1e-3

# softplus offset so a zero raw parameter maps to derivative exactly 1
_DERIV_RAW_OFFSET = math.log(math.expm1(1.0 - MIN_DERIVATIVE))


@dataclass
class SplineParams:
    """Constrained parameters of a monotone linear rational spline.

    Tensors share a common batch shape; the last axis runs over bins
    (bin count for widths/heights/lambdas, bin count + 1 for derivatives).
    Widths and heights each sum to ``2 * tail_bound``; the transform is the
    identity outside ``[-tail_bound, tail_bound]``.
    """

    bin_widths: torch.Tensor
    bin_heights: torch.Tensor
    knot_derivatives: torch.Tensor
    lambdas: torch.Tensor
    tail_bound: float = 3.0

    @property
    def num_bins(self) -> int:
        return self.bin_widths.shape[-1]

    @classmethod
    def identity(cls, num_bins: int = 8, tail_bound: float = 3.0,
                 batch_shape: tuple = ()) -> "SplineParams":
        """Uniform bins, unit derivatives, centered lambdas: v = u everywhere."""
        width = 2.0 * tail_bound / num_bins
        shape = batch_shape + (num_bins,)
        return cls(
            bin_widths=torch.full(shape, width, dtype=DTYPE),
            bin_heights=torch.full(shape, width, dtype=DTYPE),
            knot_derivatives=torch.ones(batch_shape + (num_bins + 1,), dtype=DTYPE),
            lambdas=torch.full(shape, 0.5, dtype=DTYPE),
            tail_bound=tail_bound,
        )

    def validate(self) -> None:
        if (self.bin_widths <= 0).any() or (self.bin_heights <= 0).any():
            raise ValueError("spline bins must be strictly positive")
        if (self.knot_derivatives <= 0).any():
            raise ValueError("knot derivatives must be strictly positive")
        if (self.lambdas <= 0).any() or (self.lambdas >= 1).any():
            raise ValueError("lambdas must lie in (0, 1)")
        span = 2.0 * self.tail_bound
        if not torch.allclose(self.bin_widths.sum(-1),
                              torch.tensor(span, dtype=DTYPE), rtol=1e-6):
            raise ValueError("bin widths must sum to 2 * tail_bound")
        if not torch.allclose(self.bin_heights.sum(-1),
                              torch.tensor(span, dtype=DTYPE), rtol=1e-6):
            raise ValueError("bin heights must sum to 2 * tail_bound")


def constrain_spline_params(raw: torch.Tensor, num_bins: int,
                            tail_bound: float = 3.0) -> SplineParams:
    """Map an unconstrained vector to valid spline parameters.

    ``raw`` has last dimension ``4 * num_bins + 1``. Any real input yields a
    strictly monotone spline; a zero vector yields the identity transform.
    Boundary derivatives are pinned to 1 so the map is differentiable across
    the tail boundary.
    """
    expected = 4 * num_bins + 1
    if raw.shape[-1] != expected:
        raise ValueError(f"expected last dim {expected}, got {raw.shape[-1]}")
    raw = raw.to(DTYPE)
    w_raw, h_raw, d_raw, l_raw = torch.split(
        raw, [num_bins, num_bins, num_bins + 1, num_bins], dim=-1)

    span = 2.0 * tail_bound
    widths = F.softmax(w_raw, dim=-1)
    widths = MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * num_bins) * widths
    heights = F.softmax(h_raw, dim=-1)
    heights = MIN_BIN_FRACTION + (1.0 - MIN_BIN_FRACTION * num_bins) * heights

    derivs = MIN_DERIVATIVE + F.softplus(d_raw + _DERIV_RAW_OFFSET)
    ones = torch.ones_like(derivs[..., :1])
    derivs = torch.cat([ones, derivs[..., 1:-1], ones], dim=-1)

    lambdas = MIN_LAMBDA + (1.0 - 2.0 * MIN_LAMBDA) * torch.sigmoid(l_raw)
    return SplineParams(widths * span, heights * span, derivs, lambdas, tail_bound)


def _gather_bin(params: SplineParams, inputs: torch.Tensor, by_height: bool):
    """Locate the bin for each input and pull its local quantities."""
    b = params.tail_bound

    def expand(t):
        # unbatched params are shared across all inputs
        if t.ndim == 1:
            return t.expand(inputs.shape + t.shape)
        return t

    widths = expand(params.bin_widths)
    heights = expand(params.bin_heights)
    derivs = expand(params.knot_derivatives)
    lambdas = expand(params.lambdas)
    x_knots = F.pad(torch.cumsum(widths, dim=-1), (1, 0)) - b
    y_knots = F.pad(torch.cumsum(heights, dim=-1), (1, 0)) - b
    knots = y_knots if by_height else x_knots
    idx = torch.searchsorted(knots.contiguous(), inputs.unsqueeze(-1),
                             right=False) - 1
    idx = idx.clamp(0, params.num_bins - 1)

    def pick(t):
        return t.gather(-1, idx).squeeze(-1)

    return {
        "x0": pick(x_knots),
        "y0": pick(y_knots),
        "w": pick(widths),
        "h": pick(heights),
        "d0": pick(derivs),
        "d1": derivs.gather(-1, idx + 1).squeeze(-1),
        "lam": pick(lambdas),
    }


def _bin_geometry(q):
    """Weights and mid-knot of the two rational segments inside one bin."""
    slope = q["h"] / q["w"]
    wa = torch.ones_like(slope)
    wb = torch.sqrt(q["d0"] / q["d1"])
    wc = (q["lam"] * wa * q["d0"] + (1.0 - q["lam"]) * wb * q["d1"]) / slope
    y1 = q["y0"] + q["h"]
    ym = ((1.0 - q["lam"]) * wa * q["y0"] + q["lam"] * wb * y1) \
        / ((1.0 - q["lam"]) * wa + q["lam"] * wb)
    return wa, wb, wc, y1, ym


def spline_forward(u: torch.Tensor, params: SplineParams):
    """Apply the spline. Returns (v, log|dv/du|); identity outside the bound."""
    u = u.to(DTYPE)
    b = params.tail_bound
    inside = (u >= -b) & (u <= b)
    uc = u.clamp(-b, b)

    q = _gather_bin(params, uc, by_height=False)
    wa, wb, wc, y1, ym = _bin_geometry(q)
    theta = ((uc - q["x0"]) / q["w"]).clamp(0.0, 1.0)
    lam = q["lam"]
    first = theta <= lam

    den1 = wa * (lam - theta) + wc * theta
    num1 = wa * q["y0"] * (lam - theta) + wc * ym * theta
    den2 = wc * (1.0 - theta) + wb * (theta - lam)
    num2 = wc * ym * (1.0 - theta) + wb * y1 * (theta - lam)

    den = torch.where(first, den1, den2)
    v = torch.where(first, num1, num2) / den
    deriv_num = torch.where(first,
                            wa * wc * lam * (ym - q["y0"]),
                            wb * wc * (1.0 - lam) * (y1 - ym))
    log_det = torch.log(deriv_num) - torch.log(q["w"]) - 2.0 * torch.log(den)

    v = torch.where(inside, v, u)
    log_det = torch.where(inside, log_det, torch.zeros_like(log_det))
    return v, log_det


def spline_inverse(v: torch.Tensor, params: SplineParams):
    """Invert the spline. Returns (u, log|du/dv|); identity outside the bound."""
    v = v.to(DTYPE)
    b = params.tail_bound
    inside = (v >= -b) & (v <= b)
    vc = v.clamp(-b, b)

    q = _gather_bin(params, vc, by_height=True)
    wa, wb, wc, y1, ym = _bin_geometry(q)
    lam = q["lam"]
    first = vc <= ym

    # denominators are bounded away from zero on their own segments
    phi1 = wa * lam * (vc - q["y0"]) \
        / (wa * (vc - q["y0"]) + wc * (ym - vc)).clamp_min(1e-300)
    phi2 = (wc * (ym - vc) + wb * lam * (vc - y1)) \
        / (wc * (ym - vc) + wb * (vc - y1)).clamp_max(-1e-300)
    phi = torch.where(first, phi1, phi2).clamp(0.0, 1.0)
    u = q["x0"] + q["w"] * phi

    den1 = wa * (lam - phi) + wc * phi
    den2 = wc * (1.0 - phi) + wb * (phi - lam)
    den = torch.where(first, den1, den2)
    deriv_num = torch.where(first,
                            wa * wc * lam * (ym - q["y0"]),
                            wb * wc * (1.0 - lam) * (y1 - ym))
    log_det = -(torch.log(deriv_num) - torch.log(q["w"]) - 2.0 * torch.log(den))

    u = torch.where(inside, u, v)
    log_det = torch.where(inside, log_det, torch.zeros_like(log_det))
    return u, log_det


@dataclass
class BaseDistribution:
    """Exogenous noise distribution for one scalar variable."""

    kind: str  # normal | bernoulli | uniform
    loc: float = 0.0
    scale: float = 1.0
    p: float = 0.5
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind == "normal" and self.scale <= 0:
            raise ValueError("normal scale must be positive")
        if self.kind == "bernoulli" and not 0.0 <= self.p <= 1.0:
            raise ValueError("bernoulli p must lie in [0, 1]")
        if self.kind == "uniform" and not self.lo < self.hi:
            raise ValueError("uniform requires lo < hi")

    def sample(self, n: int, generator: torch.Generator) -> torch.Tensor:
        if self.kind == "normal":
            eps = torch.randn(n, generator=generator, dtype=DTYPE)
            return self.loc + self.scale * eps
        if self.kind == "bernoulli":
            return (torch.rand(n, generator=generator, dtype=DTYPE)
                    < self.p).to(DTYPE)
        u = torch.rand(n, generator=generator, dtype=DTYPE)
        return self.lo + (self.hi - self.lo) * u

    def log_prob(self, value: torch.Tensor) -> torch.Tensor:
        value = value.to(DTYPE)
        if self.kind == "normal":
            z = (value - self.loc) / self.scale
            return -0.5 * z * z - math.log(self.scale) - 0.5 * math.log(2 * math.pi)
        if self.kind == "bernoulli":
            # density of a unit-dequantized Bernoulli draw on [0, 2)
            inside = (value >= 0) & (value < 2)
            is_one = value >= 1.0
            p = torch.tensor(self.p, dtype=DTYPE).clamp(1e-12, 1 - 1e-12)
            lp = torch.where(is_one, torch.log(p), torch.log1p(-p))
            return torch.where(inside, lp, torch.full_like(lp, -math.inf))
        inside = (value >= self.lo) & (value < self.hi)
        lp = torch.full_like(value, -math.log(self.hi - self.lo))
        return torch.where(inside, lp, torch.full_like(lp, -math.inf))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "loc": self.loc, "scale": self.scale,
                "p": self.p, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "BaseDistribution":
        return cls(**d)


def estimate_base(samples, kind: str) -> BaseDistribution:
    """Fit a base distribution to raw training samples of one covariate."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise EstimationError(f"need at least 2 samples, got {samples.size}")
    if kind == "continuous-positive":
        if (samples <= 0).any():
            raise EstimationError("continuous-positive samples must be > 0")
        logs = np.log(samples)
        return BaseDistribution("normal", loc=float(logs.mean()),
                                scale=max(float(logs.std()), SCALE_MIN))
    if kind == "binary":
        return BaseDistribution("bernoulli", p=float(samples.mean()))
    if kind == "discrete-count":
        lo, hi = float(samples.min()), float(samples.max())
        if not lo < hi:
            raise EstimationError("degenerate sample range for uniform base")
        return BaseDistribution("uniform", lo=lo, hi=hi)
    raise EstimationError(f"no base family for kind {kind!r}")


def dequantize(value, rng) -> np.ndarray | float:
    """Add Uniform[0, 1) noise to an integer-valued covariate.

    ``rng`` is a numpy Generator or an int seed. floor(result) == value.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    arr = np.asarray(value, dtype=np.float64)
    out = arr + rng.uniform(0.0, 1.0, size=arr.shape)
    return float(out) if np.isscalar(value) or arr.shape == () else out


def _as_batch(value) -> tuple[torch.Tensor, bool]:
    if isinstance(value, torch.Tensor):
        t = value.to(DTYPE)
        return (t.reshape(1), True) if t.ndim == 0 else (t, False)
    return torch.tensor([float(value)], dtype=DTYPE), True


def _parents_batch(parents, n: int) -> torch.Tensor:
    if parents is None:
        return torch.zeros(n, 0, dtype=DTYPE)
    if isinstance(parents, torch.Tensor):
        t = parents.to(DTYPE)
        return t.unsqueeze(0).expand(n, -1) if t.ndim == 1 else t
    t = torch.tensor(np.asarray(parents, dtype=np.float64), dtype=DTYPE)
    return t.unsqueeze(0).expand(n, -1) if t.ndim == 1 else t


class SplineFlowMechanism(nn.Module):
    """Conditional spline flow: v = domain(unstd(spline(std(u)))).

    The conditioner maps normalized parent values to unconstrained spline
    parameters; root variables hold a constant parameter vector instead, so
    any conditioner output is a valid monotone transform.
    """

    def __init__(self, n_parents: int, base: BaseDistribution | None = None,
                 transform_domain: str = "log", num_bins: int = 8,
                 tail_bound: float = 3.0, hidden: int = 32):
        super().__init__()
        if transform_domain not in ("log", "identity"):
            raise ValueError("transform_domain must be 'log' or 'identity'")
        self.n_parents = n_parents
        self.transform_domain = transform_domain
        self.num_bins = num_bins
        self.tail_bound = tail_bound
        self.base = base or BaseDistribution("normal")
        out_dim = 4 * num_bins + 1
        if n_parents > 0:
            self.conditioner = nn.Sequential(
                nn.Linear(n_parents, hidden), nn.Tanh(),
                nn.Linear(hidden, hidden), nn.Tanh(),
                nn.Linear(hidden, out_dim),
            ).to(DTYPE)
            # near-identity start; exact zeros would starve the hidden layers
            # of gradient
            last = self.conditioner[-1]
            nn.init.normal_(last.weight, std=0.01)
            nn.init.zeros_(last.bias)
        else:
            self.conditioner = None
            self.raw_params = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
        # normalization of parent inputs, set from data by set_parent_stats
        self.register_buffer("parent_loc", torch.zeros(max(n_parents, 1), dtype=DTYPE))
        self.register_buffer("parent_scale", torch.ones(max(n_parents, 1), dtype=DTYPE))
        self.parent_domains: list[str] = ["identity"] * n_parents

    def set_parent_stats(self, locs, scales, domains: list[str]) -> None:
        if self.n_parents == 0:
            return
        self.parent_loc.copy_(torch.tensor(locs, dtype=DTYPE))
        self.parent_scale.copy_(torch.tensor(scales, dtype=DTYPE).clamp_min(SCALE_MIN))
        self.parent_domains = list(domains)

    def set_base(self, base: BaseDistribution) -> None:
        self.base = base

    def _normalize_parents(self, parents: torch.Tensor) -> torch.Tensor:
        if self.n_parents == 0:
            return parents
        cols = []
        for j, dom in enumerate(self.parent_domains):
            col = parents[:, j]
            if dom == "log":
                col = torch.log(col.clamp_min(1e-12))
            cols.append(col)
        stacked = torch.stack(cols, dim=1)
        return (stacked - self.parent_loc) / self.parent_scale

    def _params_for(self, n: int, parents) -> SplineParams:
        if self.n_parents > 0:
            pb = _parents_batch(parents, n)
            raw = self.conditioner(self._normalize_parents(pb))
        else:
            raw = self.raw_params.unsqueeze(0).expand(n, -1)
        return constrain_spline_params(raw, self.num_bins, self.tail_bound)

    def forward_value(self, u, parents=None):
        ub, scalar = _as_batch(u)
        params = self._params_for(ub.shape[0], parents)
        t = (ub - self.base.loc) / self.base.scale
        t2, _ = spline_forward(t, params)
        y = t2 * self.base.scale + self.base.loc
        v = torch.exp(y) if self.transform_domain == "log" else y
        return float(v[0].detach()) if scalar else v

    def invert(self, v, parents=None):
        vb, scalar = _as_batch(v)
        if self.transform_domain == "log":
            if (vb <= 0).any():
                raise MechanismDomainError("log-domain value must be positive")
            y = torch.log(vb)
        else:
            y = vb
        params = self._params_for(vb.shape[0], parents)
        t2 = (y - self.base.loc) / self.base.scale
        t, _ = spline_inverse(t2, params)
        u = t * self.base.scale + self.base.loc
        return float(u[0].detach()) if scalar else u

    def log_prob(self, v, parents=None):
        vb, scalar = _as_batch(v)
        if self.transform_domain == "log":
            if (vb <= 0).any():
                raise MechanismDomainError("log-domain value must be positive")
            y = torch.log(vb)
        else:
            y = vb
        params = self._params_for(vb.shape[0], parents)
        t2 = (y - self.base.loc) / self.base.scale
        t, ld_inv = spline_inverse(t2, params)
        u = t * self.base.scale + self.base.loc
        lp = self.base.log_prob(u) + ld_inv
        if self.transform_domain == "log":
            lp = lp - y
        return float(lp[0].detach()) if scalar else lp

    def sample(self, parents=None, generator: torch.Generator | None = None, n: int = 1):
        gen = generator or torch.Generator()
        u = self.base.sample(n, gen)
        v = self.forward_value(u, parents)
        return v

    def sample_u(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return self.base.sample(n, generator)


class DirectMechanism(nn.Module):
    """Identity mechanism for root covariates sampled straight from the base."""

    def __init__(self, base: BaseDistribution, sample_jitter: bool = False):
        super().__init__()
        self.base = base
        self.sample_jitter = sample_jitter  # add U[0,1) on top of discrete draws
        self.n_parents = 0
        self.transform_domain = "identity"

    def set_base(self, base: BaseDistribution) -> None:
        self.base = base

    def forward_value(self, u, parents=None):
        return u if isinstance(u, torch.Tensor) else float(u)

    def invert(self, v, parents=None):
        return v if isinstance(v, torch.Tensor) else float(v)

    def log_prob(self, v, parents=None):
        vb, scalar = _as_batch(v)
        lp = self.base.log_prob(vb)
        return float(lp[0].detach()) if scalar else lp

    def sample(self, parents=None, generator: torch.Generator | None = None, n: int = 1):
        gen = generator or torch.Generator()
        u = self.base.sample(n, gen)
        if self.sample_jitter:
            u = u + torch.rand(n, generator=gen, dtype=DTYPE)
        return u

    def sample_u(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return self.sample(None, generator, n)


class AffineMechanism(nn.Module):
    """v = intercept + coefs . parents + noise_scale * u, with u ~ N(0, 1)."""

    def __init__(self, intercept: float, coefs, noise_scale: float):
        super().__init__()
        self.intercept = float(intercept)
        self.register_buffer("coefs", torch.tensor(coefs, dtype=DTYPE))
        self.noise_scale = float(noise_scale)
        self.n_parents = len(coefs)
        self.base = BaseDistribution("normal")
        self.transform_domain = "identity"

    def _shift(self, parents, n):
        pb = _parents_batch(parents, n)
        if pb.shape[1] == 0:
            return torch.zeros(n, dtype=DTYPE)
        return pb @ self.coefs

    def forward_value(self, u, parents=None):
        ub, scalar = _as_batch(u)
        v = self.intercept + self._shift(parents, ub.shape[0]) + self.noise_scale * ub
        return float(v[0].detach()) if scalar else v

    def invert(self, v, parents=None):
        vb, scalar = _as_batch(v)
        u = (vb - self.intercept - self._shift(parents, vb.shape[0])) / self.noise_scale
        return float(u[0].detach()) if scalar else u

    def log_prob(self, v, parents=None):
        vb, scalar = _as_batch(v)
        u = (vb - self.intercept - self._shift(parents, vb.shape[0])) / self.noise_scale
        lp = self.base.log_prob(u) - math.log(self.noise_scale)
        return float(lp[0].detach()) if scalar else lp

    def sample(self, parents=None, generator: torch.Generator | None = None, n: int = 1):
        gen = generator or torch.Generator()
        return self.forward_value(self.base.sample(n, gen), parents)

    def sample_u(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return self.base.sample(n, generator)


class ConstantMechanism(nn.Module):
    """Replaces an intervened variable: ignores parents and noise."""

    def __init__(self, value: float):
        super().__init__()
        self.value = float(value)
        self.n_parents = 0
        self.transform_domain = "identity"

    def forward_value(self, u, parents=None):
        if isinstance(u, torch.Tensor):
            return torch.full_like(u, self.value)
        return self.value

    def invert(self, v, parents=None):
        return self.value

    def log_prob(self, v, parents=None):
        raise MechanismDomainError("constant mechanism has no density")

    def sample(self, parents=None, generator=None, n: int = 1):
        return torch.full((n,), self.value, dtype=DTYPE)

    def sample_u(self, n: int, generator: torch.Generator) -> torch.Tensor:
        return torch.zeros(n, dtype=DTYPE)
