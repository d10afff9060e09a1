"""Evaluation harness on an untrained model (trained behavior is covered by
the acceptance suite)."""

import numpy as np
import pytest
import torch

from brainscm.evaluation import (
    ShiftReport,
    counterfactual_fidelity,
    covariate_fit,
    export_report,
    import_report_csv,
    lesion_volume_shift,
    split_for_fig4,
)
from brainscm.graph import Intervention
from brainscm.model import build_model, fit_statistics
from brainscm.phantom import PhantomConfig, generate_phantoms

CFG = PhantomConfig(image_size=64)


@pytest.fixture(scope="module")
def records():
    return generate_phantoms(40, CFG, seed=31)


@pytest.fixture(scope="module")
def model(records):
    torch.manual_seed(5)
    m = build_model("desk-64")
    fit_statistics(m, records)
    return m


class TestLesionVolumeShift:
    def test_null_intervention_no_shift(self, model, records):
        report = lesion_volume_shift(model, records[:10], Intervention({}), CFG)
        assert len(report.pairs) == 10
        for orig, cf in report.pairs:
            assert abs(orig - cf) <= CFG.segment_scale  # one-pixel tolerance

    def test_empty_dataset(self, model):
        report = lesion_volume_shift(model, [], Intervention({"l": 0.0}), CFG)
        assert report.pairs == []

    def test_summary_stats(self):
        report = ShiftReport(intervention={"l": 0.0},
                             pairs=[(10.0, 1.0), (20.0, 2.0), (30.0, 3.0)])
        assert report.summary["median_original"] == 20.0
        assert report.summary["median_counterfactual"] == 2.0

    def test_fig4_split(self, records):
        ms_like, lesion_free = split_for_fig4(records, CFG)
        assert all(r.covariates.l >= 10 for r in ms_like)
        assert ms_like and lesion_free


class TestCounterfactualFidelity:
    def test_null_intervention_identity(self, model, records):
        report = counterfactual_fidelity(model, records[:5], Intervention({}),
                                         CFG)
        assert max(report.image_mae) <= 1e-4
        for name, errs in report.covariate_errors.items():
            assert max(errs) == 0.0

    def test_non_descendant_errors_zero(self, model, records):
        report = counterfactual_fidelity(model, records[:5],
                                         Intervention({"l": 0.0}), CFG)
        for name in ("a", "s", "d", "e", "b", "v", "n"):
            assert max(report.covariate_errors[name]) == 0.0

    def test_mae_nonnegative_zero_iff_identical(self, model, records):
        report = counterfactual_fidelity(model, records[:5], Intervention({}),
                                         CFG)
        assert all(m >= 0 for m in report.image_mae)
        assert all(b == 0 for b in report.baseline_mae)  # truth == original


class TestCovariateFit:
    def test_reports_all_nonconstant_variables(self, model, records):
        result = covariate_fit(model, records)
        assert set(result) == {"a", "s", "d", "e", "b", "v", "l", "n"}
        for name, entry in result.items():
            assert np.isfinite(entry["mechanism_nll"])
            assert np.isfinite(entry["base_nll"])

    def test_direct_mechanisms_match_base(self, model, records):
        result = covariate_fit(model, records)
        assert result["s"]["mechanism_nll"] == result["s"]["base_nll"]
        assert result["n"]["mechanism_nll"] == result["n"]["base_nll"]

    def test_constant_variable_excluded_with_warning(self, model, records):
        frozen = [r for r in records[:5]]
        for r in frozen:
            r.covariates.s = 1.0
        with pytest.warns(UserWarning, match="'s'"):
            result = covariate_fit(model, frozen)
        assert "s" not in result

    def test_deterministic(self, model, records):
        a = covariate_fit(model, records, seed=3)
        b = covariate_fit(model, records, seed=3)
        assert a == b


class TestExportReport:
    def test_round_trip_and_files(self, tmp_path):
        report = ShiftReport(intervention={"l": 0.0},
                             pairs=[(12.0, 1.5), (25.0, 4.0), (8.0, 0.0)])
        paths = export_report(report, tmp_path / "report")
        assert paths["csv"].exists() and paths["png"].exists()
        back = import_report_csv(paths["csv"])
        assert len(back.pairs) == 3
        assert back.summary["median_original"] == report.summary["median_original"]

    def test_creates_missing_directory(self, tmp_path):
        report = ShiftReport(intervention={}, pairs=[(1.0, 1.0)])
        paths = export_report(report, tmp_path / "deep" / "nested" / "dir")
        assert paths["csv"].exists()
