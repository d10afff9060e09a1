"""Schedules, clipping, ELBO bookkeeping, and a miniature training run."""

import math

import numpy as np
import pytest
import torch

from brainscm.errors import ConfigurationError, TrainingDivergenceError
from brainscm.model import (
    build_model,
    fit_statistics,
    load_checkpoint,
    save_checkpoint,
)
from brainscm.phantom import PhantomConfig, generate_phantoms
from brainscm.training import (
    ScheduleSpec,
    TrainConfig,
    clip_gradient_norm,
    elbo,
    gradient_flow_check,
    kl_schedule,
    one_cycle_lr,
    train,
)
from brainscm.vae import AffineIaf


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_phantoms(48, PhantomConfig(image_size=64), seed=21)


@pytest.fixture(scope="module")
def fitted_model(tiny_dataset):
    torch.manual_seed(0)
    model = build_model("desk-64")
    fit_statistics(model, tiny_dataset)
    return model


def make_batch(model, records, rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    x = torch.as_tensor(np.stack([r.image for r in records]))[:, None]
    cov = {}
    for name in ("a", "s", "d", "e", "b", "v", "l", "n"):
        vals = np.array([getattr(r.covariates, name) for r in records],
                        dtype=np.float64)
        if name in model.graph.dequantized:
            vals = vals + rng.uniform(0, 1, vals.shape)
        cov[name] = vals
    return {"x": x, "covariates": cov}


class TestKlSchedule:
    def test_lambda2_endpoints(self):
        spec = ScheduleSpec(0.0, 1.0, 600)
        assert kl_schedule(0, spec) == 0.0
        assert kl_schedule(600, spec) == 1.0
        assert kl_schedule(1500, spec) == 1.0
        assert kl_schedule(300, spec) == pytest.approx(0.5)

    def test_small_preset_endpoints(self):
        cfg = TrainConfig.from_preset("small-128")
        assert (cfg.lambda0.start, cfg.lambda0.end) == (1.0, 4.4)
        assert (cfg.lambda1.start, cfg.lambda1.end) == (1.0, 1.1)
        assert kl_schedule(600, cfg.lambda0) == 4.4
        assert kl_schedule(600, cfg.lambda1) == pytest.approx(1.1)

    def test_large_preset_lambda1_start(self):
        cfg = TrainConfig.from_preset("large-224")
        assert cfg.lambda1.start == 0.5
        assert cfg.batch_size == 128

    def test_batch_size_presets(self):
        assert TrainConfig.from_preset("small-128").batch_size == 342

    def test_negative_epoch_rejected(self):
        with pytest.raises(ConfigurationError):
            kl_schedule(-1, ScheduleSpec(0, 1, 10))


class TestOneCycleLr:
    def test_exact_endpoints(self):
        cfg = TrainConfig.from_preset("small-128")
        total = 10_000
        assert one_cycle_lr(0, total, cfg) == 2e-5
        assert one_cycle_lr(0.1 * total, total, cfg) == 5e-4
        assert one_cycle_lr(total, total, cfg) == pytest.approx(5e-8, abs=1e-20)

    def test_curve_is_continuous(self):
        cfg = TrainConfig.from_preset("small-128")
        total = 1000
        values = [one_cycle_lr(s, total, cfg) for s in range(total + 1)]
        diffs = np.abs(np.diff(values))
        assert diffs.max() < (cfg.lr_peak - cfg.lr_start) / (0.1 * total) * 1.5

    def test_out_of_range_rejected(self):
        cfg = TrainConfig.from_preset("small-128")
        with pytest.raises(ConfigurationError):
            one_cycle_lr(-1, 100, cfg)


class TestClipGradientNorm:
    def test_scales_down_by_half(self):
        grads = [torch.full((4,), 100.0, dtype=torch.float64)]
        # norm = 200
        clipped, norm = clip_gradient_norm(grads, 100.0)
        assert norm == pytest.approx(200.0)
        assert torch.allclose(clipped[0],
                              torch.full((4,), 50.0, dtype=torch.float64))

    def test_below_threshold_unchanged(self):
        grads = [torch.full((4,), 25.0, dtype=torch.float64)]  # norm 50
        clipped, norm = clip_gradient_norm(grads, 100.0)
        assert norm == pytest.approx(50.0)
        assert torch.equal(clipped[0], grads[0])

    def test_fuzz_post_clip_norm(self):
        g = torch.Generator().manual_seed(17)
        for _ in range(1000):
            grads = [torch.randn(7, generator=g) * 50,
                     torch.randn(3, 3, generator=g) * 50]
            clipped, _ = clip_gradient_norm(grads, 100.0)
            post = math.sqrt(sum(float(t.pow(2).sum()) for t in clipped))
            assert post <= 100.0 + 1e-6

    def test_nonfinite_raises(self):
        with pytest.raises(TrainingDivergenceError):
            clip_gradient_norm([torch.tensor([float("nan")])])


class TestElbo:
    def test_zero_lambdas_reduce_to_reconstruction_and_nll(self, fitted_model,
                                                           tiny_dataset):
        batch = make_batch(fitted_model, tiny_dataset[:8])
        gen = torch.Generator().manual_seed(3)
        loss, parts = elbo(batch, fitted_model, 0.0, 0.0, 0.0, generator=gen)
        expected = -(parts["log_likelihood"]) - parts["cov_log_prob"]
        assert float(loss.detach()) == pytest.approx(expected, rel=1e-6)

    def test_component_sum_matches_total(self, fitted_model, tiny_dataset):
        batch = make_batch(fitted_model, tiny_dataset[:8])
        gen = torch.Generator().manual_seed(4)
        lam0, lam1, lam2 = 2.0, 1.1, 0.7
        loss, parts = elbo(batch, fitted_model, lam0, lam1, lam2, generator=gen)
        expected = -(parts["log_likelihood"] - lam2 * parts["kl_z2"]
                     - lam1 * parts["kl_z1"] - lam0 * parts["kl_z0"]) \
            - parts["cov_log_prob"]
        assert float(loss.detach()) == pytest.approx(expected, rel=1e-6)

    def test_posterior_forced_to_prior_zeroes_kl(self, fitted_model,
                                                 tiny_dataset):
        model = fitted_model
        saved_flow = model.vae.posterior_flow
        saved_encode = model.vae.encode
        model.vae.posterior_flow = AffineIaf(model.vae.cfg.k, model.vae.cfg.k,
                                             identity_init=True)

        def prior_encode(x, c):
            out = saved_encode(x, c)
            out.z2_mean.zero_()
            out.z2_scale.fill_(1.0)
            out.iaf_context.zero_()
            return out

        model.vae.encode = prior_encode
        try:
            batch = make_batch(model, tiny_dataset[:4])
            _, parts = elbo(batch, model, 1.0, 1.0, 1.0,
                            generator=torch.Generator().manual_seed(5))
            assert parts["kl_z2"] == pytest.approx(0.0, abs=1e-6)
        finally:
            model.vae.posterior_flow = saved_flow
            model.vae.encode = saved_encode

    def test_per_variable_components_present(self, fitted_model, tiny_dataset):
        batch = make_batch(fitted_model, tiny_dataset[:4])
        _, parts = elbo(batch, fitted_model, 1, 1, 1,
                        generator=torch.Generator().manual_seed(6))
        assert set(parts["per_variable_log_prob"]) == \
            {"a", "s", "d", "e", "b", "v", "l", "n"}


class TestGradientFlow:
    def test_no_dead_parameters(self, fitted_model, tiny_dataset):
        batch = make_batch(fitted_model, tiny_dataset[:8])
        missing = gradient_flow_check(fitted_model, batch,
                                      TrainConfig.from_preset("desk-64"))
        assert missing == []


class TestTrainLoop:
    def test_short_run_improves_and_checkpoints(self, tiny_dataset, tmp_path):
        torch.manual_seed(1)
        model = build_model("desk-64")
        cfg = TrainConfig.from_preset("desk-64")
        cfg.epochs = 3
        cfg.batch_size = 16
        path = train(model, tiny_dataset, cfg, tmp_path)
        assert path.exists()
        assert (tmp_path / "metrics.csv").exists()
        assert len(model.metrics) == 3
        assert model.metrics[-1]["loss"] < model.metrics[0]["loss"]
        for row in model.metrics:
            assert row["kl_z0"] >= 0 and row["kl_z1"] >= 0

    def test_checkpoint_round_trip_byte_identical(self, tiny_dataset, tmp_path):
        torch.manual_seed(2)
        model = build_model("desk-64")
        fit_statistics(model, tiny_dataset)
        p1 = save_checkpoint(model, tmp_path / "a.pt")
        loaded = load_checkpoint(p1)
        p2 = save_checkpoint(loaded, tmp_path / "b.pt")
        assert p1.read_bytes() == p2.read_bytes()

    def test_checkpoint_reproduces_loss(self, tiny_dataset, tmp_path):
        torch.manual_seed(3)
        model = build_model("desk-64")
        fit_statistics(model, tiny_dataset)
        batch = make_batch(model, tiny_dataset[:8])
        _, before = elbo(batch, model, 1, 1, 1,
                         generator=torch.Generator().manual_seed(9))
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m.pt"))
        _, after = elbo(batch, loaded, 1, 1, 1,
                        generator=torch.Generator().manual_seed(9))
        assert after["loss"] == pytest.approx(before["loss"], abs=1e-6)

    def test_resume_continues_schedule(self, tiny_dataset, tmp_path):
        torch.manual_seed(4)
        model = build_model("desk-64")
        cfg = TrainConfig.from_preset("desk-64")
        cfg.epochs = 2
        cfg.batch_size = 16
        train(model, tiny_dataset, cfg, tmp_path / "run")
        loaded = load_checkpoint(tmp_path / "run" / "checkpoint.pt")
        assert loaded.epoch == 2
        cfg.epochs = 3
        train(loaded, tiny_dataset, cfg, tmp_path / "run2", fit_stats=False)
        assert loaded.epoch == 3
        assert len(loaded.metrics) == 3

    def test_empty_dataset_rejected(self, tmp_path):
        model = build_model("desk-64")
        with pytest.raises(ConfigurationError):
            train(model, [], TrainConfig.from_preset("desk-64"), tmp_path)
