"""Acceptance suite.

Every criterion runs at the tolerance stated here and prints one
``[ACCEPTANCE] <name>: PASS`` line (visible with ``pytest -s`` or in captured
output). The desk-scale trained model is built once per cache key and reused
across criteria; delete ``.acceptance_cache/`` to retrain from scratch.
"""

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from brainscm.evaluation import (
    counterfactual_fidelity,
    covariate_fit,
    lesion_shift_suite,
    split_for_fig4,
)
from brainscm.graph import (
    CausalGraph,
    Intervention,
    VariableSpec,
    counterfactual,
)
from brainscm.mechanisms import AffineMechanism, constrain_spline_params
from brainscm.mechanisms import spline_forward, spline_inverse
from brainscm.model import build_model, fit_statistics, load_checkpoint
from brainscm.phantom import PhantomConfig, generate_phantoms
from brainscm.training import (
    ScheduleSpec,
    TrainConfig,
    gradient_flow_check,
    kl_schedule,
    one_cycle_lr,
    train,
)
from brainscm.vae import AffineIaf, ConditionalVae, VaeConfig

# pinned tolerances, from the build contract
SPLINE_ROUND_TRIP_TOL = 1e-6
LOG_DET_FD_REL_TOL = 1e-4
IDENTITY_COV_REL_TOL = 1e-5
IDENTITY_IMAGE_MAE_TOL = 1e-4
LINEAR_GAUSSIAN_TOL = 1e-6
REMOVAL_MEDIAN_FRACTION = 0.20
ADDITION_MEDIAN_ML = 10.0
FIDELITY_MAE_RATIO = 0.50
FLOW_SUITE_BUDGET_S = 60.0
IDENTITY_SUITE_BUDGET_S = 300.0

DATA_SEED = 100
HELDOUT_SEED = 200
TRAIN_SEED = 0

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".acceptance_cache"


def _announce(name: str) -> None:
    print(f"\n[ACCEPTANCE] {name}: PASS")


@pytest.fixture(scope="session")
def phantom_config():
    return PhantomConfig(image_size=64)


@pytest.fixture(scope="session")
def phantoms(phantom_config):
    return generate_phantoms(2000, phantom_config, seed=DATA_SEED)


@pytest.fixture(scope="session")
def heldout(phantom_config):
    return generate_phantoms(500, phantom_config, seed=HELDOUT_SEED)


@pytest.fixture(scope="session")
def untrained_model(phantoms):
    torch.manual_seed(TRAIN_SEED)
    model = build_model("desk-64")
    fit_statistics(model, phantoms, seed=TRAIN_SEED)
    return model


@pytest.fixture(scope="session")
def desk_model(phantoms, phantom_config):
    """Train the desk preset once; reuse across criteria via a disk cache."""
    config = TrainConfig.from_preset("desk-64")
    config.seed = TRAIN_SEED
    key_src = json.dumps({"train": config.to_dict(),
                          "phantom": phantom_config.to_dict(),
                          "data_seed": DATA_SEED}, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
    cache_dir = CACHE_ROOT / key
    checkpoint = cache_dir / "checkpoint.pt"
    if checkpoint.exists():
        return load_checkpoint(checkpoint)
    torch.manual_seed(TRAIN_SEED)
    model = build_model("desk-64")
    train(model, phantoms, config, cache_dir)
    return model


class TestFlowCorrectnessSuite:
    def test_flow_correctness(self):
        started = time.monotonic()
        n = 10_000
        g = torch.Generator().manual_seed(7)
        raw = 2.0 * torch.randn(n, 33, generator=g, dtype=torch.float64)
        params = constrain_spline_params(raw, 8)
        u = torch.empty(n, dtype=torch.float64).uniform_(-3.4, 3.4, generator=g)
        v, ld_f = spline_forward(u, params)
        back, ld_i = spline_inverse(v, params)
        assert (back - u).abs().max().item() <= SPLINE_ROUND_TRIP_TOL
        assert (ld_f + ld_i).abs().max().item() <= SPLINE_ROUND_TRIP_TOL

        grid = torch.linspace(-2.95, 2.95, 500, dtype=torch.float64)
        grid_params = constrain_spline_params(
            2.0 * torch.randn(500, 33, generator=g, dtype=torch.float64), 8)
        _, ld = spline_forward(grid, grid_params)
        h = 1e-6
        vp, _ = spline_forward(grid + h, grid_params)
        vm, _ = spline_forward(grid - h, grid_params)
        fd = torch.log((vp - vm) / (2 * h))
        rel = ((ld - fd).abs() / fd.abs().clamp_min(1e-8)).max().item()
        assert rel <= LOG_DET_FD_REL_TOL

        # triangular-Jacobian check on a randomized affine IAF step
        dim = 12
        torch.manual_seed(8)
        flow = AffineIaf(dim, context_dim=dim).double()
        with torch.no_grad():
            flow.shift_layer.weight.normal_(0, 0.4)
            flow.log_scale_layer.weight.normal_(0, 0.4)
            z = torch.randn(dim, dtype=torch.float64)
            ctx = torch.randn(dim, dtype=torch.float64)
            jac = np.zeros((dim, dim))
            for j in range(dim):
                zp, zm = z.clone(), z.clone()
                zp[j] += 1e-5
                zm[j] -= 1e-5
                fp, _ = flow(zp.unsqueeze(0), ctx.unsqueeze(0))
                fm, _ = flow(zm.unsqueeze(0), ctx.unsqueeze(0))
                jac[:, j] = ((fp - fm) / 2e-5).squeeze(0).numpy()
        assert np.abs(np.triu(jac, k=1)).max() <= 1e-6

        elapsed = time.monotonic() - started
        assert elapsed < FLOW_SUITE_BUDGET_S
        _announce(f"flow correctness suite ({elapsed:.1f}s)")


class TestCounterfactualIdentitySuite:
    def _run_identity(self, model, records):
        for rec in records:
            for assignments in ({}, {"a": rec.covariates.a}):
                cf_record, cf_image = model.counterfactual(
                    rec.covariates, rec.image, assignments)
                for name, before in rec.covariates.to_dict().items():
                    after = getattr(cf_record, name)
                    rel = abs(after - before) / max(abs(before), 1e-12)
                    assert rel <= IDENTITY_COV_REL_TOL, (name, before, after)
                mae = float(np.abs(np.asarray(cf_image, dtype=np.float64)
                                   - rec.image).mean())
                assert mae <= IDENTITY_IMAGE_MAE_TOL

    def test_identity_on_100_phantoms(self, untrained_model, desk_model,
                                      phantoms):
        started = time.monotonic()
        subset = phantoms[:100]
        self._run_identity(untrained_model, subset)
        self._run_identity(desk_model, subset)
        elapsed = time.monotonic() - started
        assert elapsed < IDENTITY_SUITE_BUDGET_S
        _announce(f"counterfactual identity suite ({elapsed:.1f}s)")


class TestLinearGaussianOracle:
    MU1, SIG1 = 2.0, 1.5
    A0, A1, SIG2 = -1.0, 0.8, 0.7
    B0, B1, B2, SIG3 = 0.5, -0.3, 1.2, 0.4

    def test_closed_form_match(self):
        graph = CausalGraph(
            variables=[
                VariableSpec("x1", "continuous-positive"),
                VariableSpec("x2", "continuous-positive", parents=("x1",)),
                VariableSpec("x3", "continuous-positive", parents=("x1", "x2")),
            ],
            mechanisms={
                "x1": AffineMechanism(self.MU1, [], self.SIG1),
                "x2": AffineMechanism(self.A0, [self.A1], self.SIG2),
                "x3": AffineMechanism(self.B0, [self.B1, self.B2], self.SIG3),
            })
        obs = {"x1": 1.3, "x2": -0.2, "x3": 2.4}
        cases = [("x1", 5.0), ("x1", -2.0), ("x2", 1.7), ("x3", 0.0)]
        for target, value in cases:
            got, _ = counterfactual(graph, (obs, None),
                                    Intervention({target: value}))
            x1, x2, x3 = obs["x1"], obs["x2"], obs["x3"]
            if target == "x1":
                c1 = value
                c2 = x2 + self.A1 * (c1 - x1)
                c3 = x3 + self.B1 * (c1 - x1) + self.B2 * (c2 - x2)
            elif target == "x2":
                c1, c2 = x1, value
                c3 = x3 + self.B2 * (c2 - x2)
            else:
                c1, c2, c3 = x1, x2, value
            for name, want in zip(("x1", "x2", "x3"), (c1, c2, c3)):
                assert abs(got[name] - want) <= LINEAR_GAUSSIAN_TOL
        _announce("linear-Gaussian oracle")


class TestScheduleConformance:
    def test_schedules(self):
        cfg = TrainConfig.from_preset("small-128")
        total = 20_000
        assert one_cycle_lr(0, total, cfg) == 2e-5
        assert one_cycle_lr(0.1 * total, total, cfg) == 5e-4
        assert one_cycle_lr(total, total, cfg) == pytest.approx(5e-8, abs=1e-22)

        lam2 = ScheduleSpec(0.0, 1.0, 600)
        assert kl_schedule(0, lam2) == 0.0
        assert kl_schedule(600, lam2) == 1.0

        assert (cfg.lambda0.start, cfg.lambda0.end) == (1.0, 4.4)
        assert (cfg.lambda1.start, cfg.lambda1.end) == (1.0, 1.1)
        large = TrainConfig.from_preset("large-224")
        assert large.lambda1.start == 0.5
        assert cfg.batch_size == 342 and large.batch_size == 128
        _announce("schedule conformance")


class TestTrainingProgress:
    def test_desk_run_progress(self, desk_model):
        metrics = desk_model.metrics
        assert len(metrics) == 50
        assert metrics[-1]["loss"] < metrics[0]["loss"]
        for row in metrics:
            assert row["kl_z0"] >= 0.0
            assert row["kl_z1"] >= 0.0
            assert row["kl_z2"] >= 0.0
        _announce(
            f"training progress (loss {metrics[0]['loss']:.0f} -> "
            f"{metrics[-1]['loss']:.0f})")

    def test_gradient_reaches_every_parameter_group(self, phantoms):
        torch.manual_seed(TRAIN_SEED)
        model = build_model("desk-64")
        fit_statistics(model, phantoms[:256], seed=TRAIN_SEED)
        rng = np.random.default_rng(0)
        from brainscm.model import _records_to_arrays
        from brainscm.training import _batch_covariates
        images, cols = _records_to_arrays(phantoms[:64])
        batch = {"x": torch.as_tensor(images)[:, None],
                 "covariates": _batch_covariates(
                     cols, np.arange(64), model.graph.dequantized, rng)}
        missing = gradient_flow_check(model, batch,
                                      TrainConfig.from_preset("desk-64"))
        assert missing == []
        _announce("gradient flow at initialization")


class TestFig4Analogue:
    def test_lesion_volume_shift(self, desk_model, phantoms, phantom_config):
        suite = lesion_shift_suite(desk_model, phantoms[:400], phantom_config)
        removal = suite["removal"].summary
        addition = suite["addition"].summary
        ratio = removal["median_counterfactual"] \
            / max(removal["median_original"], 1e-9)
        assert ratio <= REMOVAL_MEDIAN_FRACTION, removal
        assert addition["median_counterfactual"] >= ADDITION_MEDIAN_ML, addition
        _announce(
            f"fig-4 analogue (removal ratio {ratio:.3f}, addition median "
            f"{addition['median_counterfactual']:.1f} mL)")


class TestOracleFidelity:
    def test_halfway_to_ground_truth(self, desk_model, phantoms,
                                     phantom_config):
        ms_like, _ = split_for_fig4(phantoms[:400], phantom_config)
        report = counterfactual_fidelity(desk_model, ms_like[:60],
                                         Intervention({"l": 0.0}),
                                         phantom_config)
        assert report.summary["mae_ratio"] <= FIDELITY_MAE_RATIO, report.summary
        _announce(f"oracle fidelity (MAE ratio "
                  f"{report.summary['mae_ratio']:.3f})")


class TestCovariateFit:
    def test_trained_beats_base(self, desk_model, heldout):
        fit = covariate_fit(desk_model, heldout, seed=0)
        for name, entry in fit.items():
            assert entry["mechanism_nll"] <= entry["base_nll"] + 1e-9, \
                (name, entry)
        _announce("covariate fit on held-out split")


class TestShapeConformance:
    def test_both_presets(self):
        small = VaeConfig.from_preset("small-128")
        assert (small.k, small.flat_dim, small.m, small.n) == (100, 8192, 4, 1)
        large = VaeConfig.from_preset("large-224")
        assert (large.k, large.flat_dim, large.m, large.n) == (120, 25088, 8, 2)
        torch.manual_seed(0)
        for cfg, size, z0, z1 in ((small, 128, (64, 64), (16, 16)),
                                  (large, 224, (112, 112), (28, 28))):
            vae = ConditionalVae(cfg)
            enc = vae.encode(torch.zeros(1, 1, size, size),
                             torch.zeros(1, 4))
            assert enc.z2_mean.shape[-1] == cfg.k
            assert tuple(enc.z0_logits.shape[-2:]) == z0
            assert tuple(enc.z1_logits.shape[-2:]) == z1
            assert enc.z1_logits.shape[1] == cfg.m
            assert enc.z0_logits.shape[1] == cfg.n
        _announce("shape conformance for both presets")
