"""Counterfactual quality metrics against the phantom oracle.

Three views: how far an intervention moves the oracle-segmented lesion
volume, how close the model's counterfactual image is to the ground-truth
re-render, and how well the covariate mechanisms fit held-out records.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .graph import COVARIATE_NAMES, Intervention
from .mechanisms import SplineFlowMechanism
from .model import ScmModel
from .phantom import (
    PhantomConfig,
    PhantomRecord,
    oracle_segment_lesions,
    true_counterfactual,
)


@dataclass
class ShiftReport:
    """Per-record (original, counterfactual) segmented volumes."""

    intervention: dict[str, float]
    pairs: list[tuple[float, float]]
    summary: dict[str, float] = field(default_factory=dict)
    bin_edges: list[float] = field(default_factory=list)
    counts_original: list[int] = field(default_factory=list)
    counts_counterfactual: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.pairs and not self.summary:
            orig = np.array([p[0] for p in self.pairs])
            cf = np.array([p[1] for p in self.pairs])
            q1o, q3o = np.percentile(orig, [25, 75])
            q1c, q3c = np.percentile(cf, [25, 75])
            self.summary = {
                "median_original": float(np.median(orig)),
                "median_counterfactual": float(np.median(cf)),
                "iqr_original": float(q3o - q1o),
                "iqr_counterfactual": float(q3c - q1c),
            }
            top = max(orig.max(), cf.max(), 1.0)
            edges = np.linspace(0.0, float(top), 21)
            self.bin_edges = edges.tolist()
            self.counts_original = np.histogram(orig, edges)[0].tolist()
            self.counts_counterfactual = np.histogram(cf, edges)[0].tolist()


def lesion_volume_shift(model: ScmModel, records: list[PhantomRecord],
                        intervention: Intervention,
                        phantom_config: PhantomConfig) -> ShiftReport:
    """Segment each record before and after the model's counterfactual."""
    pairs = []
    with torch.no_grad():
        for rec in records:
            _, vol_before = oracle_segment_lesions(rec.image, rec.brain_mask,
                                                   phantom_config)
            _, cf_image = model.counterfactual(rec.covariates, rec.image,
                                               intervention.assignments)
            _, vol_after = oracle_segment_lesions(
                np.asarray(cf_image, dtype=np.float32), rec.brain_mask,
                phantom_config)
            pairs.append((vol_before, vol_after))
    return ShiftReport(intervention=dict(intervention.assignments), pairs=pairs)


def split_for_fig4(records: list[PhantomRecord], phantom_config: PhantomConfig,
                   ms_threshold_ml: float = 10.0):
    """(MS-like, lesion-free) subsets: ground-truth volume >= threshold vs
    oracle-segmented volume of zero."""
    ms_like, lesion_free = [], []
    for rec in records:
        if rec.covariates.l >= ms_threshold_ml:
            ms_like.append(rec)
        else:
            _, vol = oracle_segment_lesions(rec.image, rec.brain_mask,
                                            phantom_config)
            if vol == 0.0:
                lesion_free.append(rec)
    return ms_like, lesion_free


def lesion_shift_suite(model: ScmModel, records: list[PhantomRecord],
                       phantom_config: PhantomConfig,
                       removal_target: float = 0.0,
                       addition_target: float = 65.0):
    """Both directions of the lesion-shift experiment."""
    ms_like, lesion_free = split_for_fig4(records, phantom_config)
    removal = lesion_volume_shift(model, ms_like,
                                  Intervention({"l": removal_target}),
                                  phantom_config)
    addition = lesion_volume_shift(model, lesion_free,
                                   Intervention({"l": addition_target}),
                                   phantom_config)
    return {"removal": removal, "addition": addition}


@dataclass
class FidelityReport:
    intervention: dict[str, float]
    image_mae: list[float]
    baseline_mae: list[float]            # |original - true counterfactual|
    covariate_errors: dict[str, list[float]]
    summary: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.image_mae and not self.summary:
            self.summary = {
                "mean_image_mae": float(np.mean(self.image_mae)),
                "mean_baseline_mae": float(np.mean(self.baseline_mae)),
                "mae_ratio": float(np.mean(self.image_mae)
                                   / max(np.mean(self.baseline_mae), 1e-12)),
            }
            for name, errs in self.covariate_errors.items():
                self.summary[f"max_abs_err_{name}"] = float(np.max(errs))


def counterfactual_fidelity(model: ScmModel, records: list[PhantomRecord],
                            intervention: Intervention,
                            phantom_config: PhantomConfig) -> FidelityReport:
    """Compare the model's counterfactuals with the oracle re-renders."""
    image_mae, baseline_mae = [], []
    cov_errors: dict[str, list[float]] = {k: [] for k in COVARIATE_NAMES}
    with torch.no_grad():
        for rec in records:
            truth = true_counterfactual(rec, intervention, phantom_config)
            cf_record, cf_image = model.counterfactual(
                rec.covariates, rec.image, intervention.assignments)
            cf_image = np.asarray(cf_image, dtype=np.float64)
            image_mae.append(float(np.abs(cf_image - truth.image).mean()))
            baseline_mae.append(
                float(np.abs(rec.image.astype(np.float64) - truth.image).mean()))
            for name in COVARIATE_NAMES:
                cov_errors[name].append(
                    abs(getattr(cf_record, name) - getattr(truth.covariates, name)))
    return FidelityReport(intervention=dict(intervention.assignments),
                          image_mae=image_mae, baseline_mae=baseline_mae,
                          covariate_errors=cov_errors)


def covariate_fit(model: ScmModel, records: list[PhantomRecord],
                  seed: int = 0) -> dict[str, dict[str, float]]:
    """Held-out mean NLL per variable: trained mechanism vs base-only.

    Constant-valued variables are excluded with a warning. Base-only NLL uses
    the fitted base distribution in the mechanism's own transform domain.
    """
    rng = np.random.default_rng(seed)
    cols = {k: np.array([getattr(r.covariates, k) for r in records],
                        dtype=np.float64) for k in COVARIATE_NAMES}
    deq = {k: cols[k] + rng.uniform(0, 1, cols[k].shape)
           if k in model.graph.dequantized else cols[k] for k in cols}
    out: dict[str, dict[str, float]] = {}
    for name in model.graph.scalar_names:
        values = deq[name]
        if np.std(cols[name]) == 0.0:  # constant before dequantization
            warnings.warn(f"variable {name!r} is constant on the held-out set; "
                          f"excluded from covariate fit")
            continue
        spec = model.graph.spec(name)
        mech = model.graph.mechanisms[name]
        vt = torch.as_tensor(values)
        parents = None
        if spec.parents:
            parents = torch.stack(
                [torch.as_tensor(deq[p]) for p in spec.parents], dim=1)
        mech_nll = float(-mech.log_prob(vt, parents).mean())
        if isinstance(mech, SplineFlowMechanism):
            base_lp = mech.base.log_prob(torch.log(vt)
                                         if mech.transform_domain == "log"
                                         else vt)
            if mech.transform_domain == "log":
                base_lp = base_lp - torch.log(vt)
            base_nll = float(-base_lp.mean())
        else:
            base_nll = mech_nll
        out[name] = {"mechanism_nll": mech_nll, "base_nll": base_nll}
    return out


def export_report(report: ShiftReport, path) -> dict[str, Path]:
    """CSV of volume pairs plus a two-panel histogram figure with a paired
    inset, in the layout of the lesion-shift experiment."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    csv_path = root / "lesion_volume_shift.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record", "original_volume_ml",
                         "counterfactual_volume_ml"])
        for i, (orig, cf) in enumerate(report.pairs):
            writer.writerow([i, f"{orig:.6f}", f"{cf:.6f}"])

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    if report.pairs:
        orig = [p[0] for p in report.pairs]
        cf = [p[1] for p in report.pairs]
        edges = report.bin_edges
        ax.hist(orig, bins=edges, alpha=0.6, label="original")
        ax.hist(cf, bins=edges, alpha=0.6, label="counterfactual")
        inset = ax.inset_axes([0.55, 0.45, 0.42, 0.5])
        for o, c in zip(orig, cf):
            inset.plot([0, 1], [o, c], color="gray", alpha=0.3, linewidth=0.7)
        inset.set_xticks([0, 1], ["orig", "cf"])
        inset.set_ylabel("volume (mL)", fontsize=7)
        inset.tick_params(labelsize=7)
    label = ", ".join(f"{k}:={v:g}" for k, v in report.intervention.items())
    ax.set_xlabel("segmented lesion volume (mL)")
    ax.set_ylabel("count")
    ax.set_title(f"do({label})" if label else "null intervention")
    ax.legend()
    png_path = root / "lesion_volume_shift.png"
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return {"csv": csv_path, "png": png_path}


def import_report_csv(path) -> ShiftReport:
    pairs = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            pairs.append((float(row["original_volume_ml"]),
                          float(row["counterfactual_volume_ml"])))
    return ShiftReport(intervention={}, pairs=pairs)
