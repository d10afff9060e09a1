"""Joint optimization of the covariate flows and the image VAE.

The loss is the negative evidence lower bound: Laplace reconstruction minus
KL-weighted latent terms, plus the covariate mechanisms' negative
log-likelihoods. KL weights warm up linearly; the learning rate follows a
one-cycle curve; gradients are clipped at a global norm of 100.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, TrainingDivergenceError
from .model import ScmModel, _records_to_arrays, fit_statistics, save_checkpoint


@dataclass(frozen=True)
class ScheduleSpec:
    """Linear warm-up: start -> end over `duration` epochs, constant after."""

    start: float
    end: float
    duration: int


@dataclass
class TrainConfig:
    preset: str = "small-128"
    epochs: int = 2000
    batch_size: int = 342
    lr_start: float = 2e-5
    lr_peak: float = 5e-4
    lr_final: float = 5e-8
    warm_fraction: float = 0.1
    lambda2: ScheduleSpec = ScheduleSpec(0.0, 1.0, 600)
    lambda0: ScheduleSpec = ScheduleSpec(1.0, 4.4, 600)
    lambda1: ScheduleSpec = ScheduleSpec(1.0, 1.1, 600)
    grad_clip_norm: float = 100.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    checkpoint_every: int = 0   # 0: only the final checkpoint
    log_every: int = 1

    def __post_init__(self):
        if not (self.lr_start > 0 and self.lr_peak > 0 and self.lr_final > 0):
            raise ConfigurationError("learning rates must be positive")
        if not 0 < self.warm_fraction < 1:
            raise ConfigurationError("warm_fraction must lie in (0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs and batch size must be positive")

    @classmethod
    def from_preset(cls, name: str) -> "TrainConfig":
        if name == "small-128":
            return cls(preset=name)
        if name == "large-224":
            return cls(preset=name, batch_size=128,
                       lambda1=ScheduleSpec(0.5, 1.1, 600))
        if name == "desk-64":
            # scaled-down run: same schedule structure; KL pressure on the
            # binary latents arrives late so they are used before being priced
            return cls(preset=name, epochs=50, batch_size=64,
                       lr_start=2e-4, lr_peak=2e-3, lr_final=2e-5,
                       warm_fraction=0.15,
                       lambda2=ScheduleSpec(0.0, 2.5, 35),
                       lambda0=ScheduleSpec(0.3, 4.4, 45),
                       lambda1=ScheduleSpec(0.3, 1.1, 45))
        raise ConfigurationError(f"unknown training preset {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("lambda0", "lambda1", "lambda2"):
            d[key] = list(d[key].values()) if isinstance(d[key], dict) else \
                [getattr(self, key).start, getattr(self, key).end,
                 getattr(self, key).duration]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("lambda0", "lambda1", "lambda2"):
            if key in d and not isinstance(d[key], ScheduleSpec):
                d[key] = ScheduleSpec(*d[key])
        d["adam_betas"] = tuple(d.get("adam_betas", (0.9, 0.999)))
        return cls(**d)


def kl_schedule(epoch: float, spec: ScheduleSpec) -> float:
    """KL weight at `epoch`: linear from start to end, then flat."""
    if epoch < 0:
        raise ConfigurationError("epoch must be nonnegative")
    if spec.duration <= 0 or epoch >= spec.duration:
        return float(spec.end)
    return float(spec.start + (spec.end - spec.start) * (epoch / spec.duration))


def one_cycle_lr(step: float, total_steps: int, config: TrainConfig) -> float:
    """Linear rise to the peak over the warm fraction, cosine decay after."""
    if not 0 <= step <= total_steps:
        raise ConfigurationError("step must lie in [0, total_steps]")
    warm = config.warm_fraction * total_steps
    if step <= warm:
        t = step / warm if warm > 0 else 1.0
        return config.lr_start + (config.lr_peak - config.lr_start) * t
    t = (step - warm) / (total_steps - warm)
    return config.lr_final + (config.lr_peak - config.lr_final) \
        * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_gradient_norm(gradients, max_norm: float = 100.0):
    """Scale a list of gradient tensors so their global norm is <= max_norm."""
    total = 0.0
    for g in gradients:
        if not torch.isfinite(g).all():
            raise TrainingDivergenceError("non-finite gradient encountered")
        total += float(g.double().pow(2).sum())
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return [g.clone() for g in gradients], norm
    # small margin keeps the post-clip norm under the bound in float32
    factor = max_norm / norm * (1.0 - 1e-6)
    return [g * factor for g in gradients], norm


def _clip_param_gradients(params, max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is None:
            continue
        if not torch.isfinite(p.grad).all():
            raise TrainingDivergenceError("non-finite gradient encountered")
        total += float(p.grad.double().pow(2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm * (1.0 - 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad.mul_(factor)
    return norm


def _batch_covariates(cols: dict[str, np.ndarray], idx: np.ndarray,
                      dequantized: frozenset, rng: np.random.Generator
                      ) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in cols.items():
        vals = arr[idx].astype(np.float64)
        if name in dequantized:
            vals = vals + rng.uniform(0, 1, vals.shape)
        out[name] = vals
    return out


def elbo(batch: dict, model: ScmModel, lambda0: float, lambda1: float,
         lambda2: float, generator: torch.Generator | None = None):
    """Loss and its components on one batch.

    ``batch`` holds ``x`` (B,1,H,W float32) and ``covariates`` (modeling-domain
    values, discrete ones already dequantized).
    """
    cov = batch["covariates"]
    x = batch["x"]
    c_raw = torch.stack(
        [torch.as_tensor(cov[name], dtype=torch.float32)
         for name in model.vae.cond_vars], dim=1)
    vae_terms = model.vae.elbo_terms(x, c_raw, generator=generator)

    cov_logprob = x.new_zeros((), dtype=torch.float64)
    per_variable = {}
    for name, mech in model.graph.mechanisms.items():
        spec = model.graph.spec(name)
        if spec.kind == "image":
            continue
        values = torch.as_tensor(cov[name], dtype=torch.float64)
        parents = None
        if spec.parents:
            parents = torch.stack(
                [torch.as_tensor(cov[p], dtype=torch.float64)
                 for p in spec.parents], dim=1)
        lp = mech.log_prob(values, parents).mean()
        per_variable[name] = float(lp.detach())
        cov_logprob = cov_logprob + lp

    loss = -(vae_terms["log_likelihood"]
             - lambda2 * vae_terms["kl_z2"]
             - lambda1 * vae_terms["kl_z1"]
             - lambda0 * vae_terms["kl_z0"]) - cov_logprob
    components = {
        "loss": float(loss.detach()),
        "log_likelihood": float(vae_terms["log_likelihood"].detach()),
        "kl_z0": float(vae_terms["kl_z0"].detach()),
        "kl_z1": float(vae_terms["kl_z1"].detach()),
        "kl_z2": float(vae_terms["kl_z2"].detach()),
        "cov_log_prob": float(cov_logprob.detach()),
        "per_variable_log_prob": per_variable,
    }
    if not math.isfinite(components["loss"]):
        raise TrainingDivergenceError("loss is not finite", components)
    return loss, components


def gradient_flow_check(model: ScmModel, batch: dict,
                        config: TrainConfig) -> list[str]:
    """Names of parameter groups that receive no gradient on a probe batch."""
    params = model.trainable_parameters()
    for p in params:
        p.grad = None
    loss, _ = elbo(batch, model,
                   kl_schedule(0, config.lambda0),
                   kl_schedule(0, config.lambda1),
                   max(kl_schedule(0, config.lambda2), 1e-3),
                   generator=torch.Generator().manual_seed(config.seed))
    loss.backward()
    missing = []
    for name, p in _named_trainables(model):
        if p.grad is None or float(p.grad.abs().sum()) == 0.0:
            missing.append(name)
    for p in params:
        p.grad = None
    return missing


def _named_trainables(model: ScmModel):
    for name, p in model.vae.named_parameters():
        yield f"vae.{name}", p
    for mech_name, mech in model.spline_mechanisms.items():
        for name, p in mech.named_parameters():
            yield f"{mech_name}.{name}", p


def train(model: ScmModel, records, config: TrainConfig, out_dir,
          fit_stats: bool = True) -> Path:
    """Run the optimization; returns the final checkpoint path.

    Emits ``metrics.csv`` (one row per epoch) and periodic checkpoints under
    ``out_dir``. On divergence the last good checkpoint is kept and the error
    re-raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(records) == 0:
        raise ConfigurationError("training dataset is empty")
    torch.manual_seed(config.seed)
    if fit_stats:
        fit_statistics(model, records, seed=config.seed)

    images, cols = _records_to_arrays(records)
    if images.ndim == 3:
        images = images[:, None]
    x_all = torch.as_tensor(images)
    count = x_all.shape[0]
    rng = np.random.default_rng(config.seed)
    sample_gen = torch.Generator().manual_seed(config.seed + 1)

    steps_per_epoch = max(count // config.batch_size, 1)
    total_steps = steps_per_epoch * config.epochs
    params = model.trainable_parameters()
    optimizer = torch.optim.Adam(params, lr=config.lr_start,
                                 betas=config.adam_betas)

    probe_idx = np.arange(min(count, config.batch_size))
    probe = {"x": x_all[probe_idx],
             "covariates": _batch_covariates(cols, probe_idx,
                                             model.graph.dequantized, rng)}
    dead = gradient_flow_check(model, probe, config)
    if dead:
        raise TrainingDivergenceError(
            f"parameters receive no gradient at initialization: {dead[:8]}")

    metrics_path = out_dir / "metrics.csv"
    fieldnames = ["epoch", "loss", "log_likelihood", "kl_z0", "kl_z1", "kl_z2",
                  "cov_log_prob", "lr", "lambda0", "lambda1", "lambda2",
                  "grad_norm"]
    start_epoch = model.epoch
    global_step = start_epoch * steps_per_epoch
    mode = "a" if start_epoch and metrics_path.exists() else "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if mode == "w":
            writer.writeheader()
        for epoch in range(start_epoch, config.epochs):
            lam0 = kl_schedule(epoch, config.lambda0)
            lam1 = kl_schedule(epoch, config.lambda1)
            lam2 = kl_schedule(epoch, config.lambda2)
            order = rng.permutation(count)
            epoch_sums = {k: 0.0 for k in fieldnames[1:7]}
            grad_norms = []
            for step in range(steps_per_epoch):
                idx = order[step * config.batch_size:
                            (step + 1) * config.batch_size]
                batch = {"x": x_all[idx],
                         "covariates": _batch_covariates(
                             cols, idx, model.graph.dequantized, rng)}
                lr = one_cycle_lr(min(global_step, total_steps), total_steps,
                                  config)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                try:
                    loss, parts = elbo(batch, model, lam0, lam1, lam2,
                                       generator=sample_gen)
                    loss.backward()
                    grad_norms.append(
                        _clip_param_gradients(params, config.grad_clip_norm))
                except TrainingDivergenceError:
                    save_checkpoint(model, out_dir / "checkpoint-last-good.pt",
                                    config.to_dict())
                    raise
                optimizer.step()
                global_step += 1
                for key in epoch_sums:
                    epoch_sums[key] += parts[key]
            row = {k: epoch_sums[k] / steps_per_epoch for k in epoch_sums}
            row.update(epoch=epoch + 1, lr=lr, lambda0=lam0, lambda1=lam1,
                       lambda2=lam2, grad_norm=max(grad_norms))
            writer.writerow(row)
            fh.flush()
            model.epoch = epoch + 1
            model.metrics.append(row)
            if config.checkpoint_every and \
                    (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"checkpoint-{epoch + 1}.pt",
                                config.to_dict())
    final = save_checkpoint(model, out_dir / "checkpoint.pt", config.to_dict())
    return final
