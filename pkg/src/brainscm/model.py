"""Assembly of the full model: causal graph, spline mechanisms, image VAE,
data-fitted statistics, and the versioned checkpoint format."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetIOError
from .graph import (
    CausalGraph,
    CovariateRecord,
    DEFAULT_GRAPH_CONFIG,
    Intervention,
    abduct,
    ancestral_sample,
    build_graph,
    counterfactual,
)
from .mechanisms import BaseDistribution, SplineFlowMechanism, estimate_base
from .phantom import PhantomRecord
from .vae import ConditionalVae, ImageMechanism, VaeConfig, apply_weight_norm

CHECKPOINT_VERSION = 1


@dataclass
class ScmModel:
    """A trained (or trainable) structural causal model over covariates and
    images. Read-only once training finishes; safe to share across threads."""

    graph: CausalGraph
    vae: ConditionalVae
    graph_config: dict
    vae_preset: str
    epoch: int = 0
    metrics: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    # convenience pass-throughs -------------------------------------------
    def counterfactual(self, record, image, assignments: dict[str, float],
                       deterministic: bool = True, seed: int | None = None):
        gen = None
        if not deterministic:
            gen = torch.Generator()
            if seed is not None:
                gen.manual_seed(seed)
        return counterfactual(self.graph, (record, image),
                              Intervention(dict(assignments)),
                              sample_generator=gen)

    def abduct(self, record, image=None):
        return abduct(self.graph, record, image)

    def sample(self, count: int, seed: int):
        return ancestral_sample(self.graph, count, seed)

    @property
    def spline_mechanisms(self) -> dict[str, SplineFlowMechanism]:
        return {name: mech for name, mech in self.graph.mechanisms.items()
                if isinstance(mech, SplineFlowMechanism)}

    def trainable_parameters(self):
        params = list(self.vae.parameters())
        for mech in self.spline_mechanisms.values():
            params.extend(mech.parameters())
        return params


def build_model(vae_preset: str = "small-128",
                graph_config: dict | None = None) -> ScmModel:
    graph_config = graph_config or DEFAULT_GRAPH_CONFIG
    graph = build_graph(graph_config)
    vae = ConditionalVae(VaeConfig.from_preset(vae_preset))
    apply_weight_norm(vae)
    if graph.image_var is not None:
        graph.mechanisms[graph.image_var] = ImageMechanism(vae)
    return ScmModel(graph=graph, vae=vae, graph_config=graph_config,
                    vae_preset=vae_preset)


def _records_to_arrays(records) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """(images, covariate columns) from phantom records or (image, cov) pairs."""
    images, columns = [], {k: [] for k in
                           ("a", "s", "d", "e", "b", "v", "l", "n")}
    for rec in records:
        if isinstance(rec, PhantomRecord):
            image, cov = rec.image, rec.covariates
        else:
            image, cov = rec
        images.append(np.asarray(image, dtype=np.float32))
        for k in columns:
            columns[k].append(getattr(cov, k))
    return (np.stack(images) if images else np.zeros((0, 1, 1), np.float32),
            {k: np.asarray(v, dtype=np.float64) for k, v in columns.items()})


def fit_statistics(model: ScmModel, records, seed: int = 0) -> None:
    """Fit base distributions, conditioner input statistics, and the VAE's
    conditioning normalization from the training records."""
    _, cols = _records_to_arrays(records)
    rng = np.random.default_rng(seed)
    deq = {k: cols[k] + rng.uniform(0, 1, cols[k].shape)
           if k in model.graph.dequantized else cols[k] for k in cols}

    for name in model.graph.scalar_names:
        spec = model.graph.spec(name)
        mech = model.graph.mechanisms[name]
        if spec.kind == "binary":
            mech.set_base(estimate_base(cols[name], "binary"))
        elif spec.kind == "discrete-count":
            lo = float(np.floor(cols[name].min()))
            hi = float(np.floor(cols[name].max())) + 1.0
            mech.set_base(BaseDistribution("uniform", lo=lo, hi=hi))
        else:
            positive = np.clip(deq[name], 1e-6, None)
            mech.set_base(estimate_base(positive, "continuous-positive"))
        if isinstance(mech, SplineFlowMechanism) and mech.n_parents:
            locs, scales = [], []
            for parent, domain in zip(spec.parents, mech.parent_domains):
                vals = deq[parent]
                if domain == "log":
                    vals = np.log(np.clip(vals, 1e-3, None))
                locs.append(float(vals.mean()))
                scales.append(float(max(vals.std(), 1e-3)))
            mech.set_parent_stats(locs, scales, mech.parent_domains)

    c_cols = [deq[name] for name in model.vae.cond_vars]
    c_mat = np.stack(c_cols, axis=1)
    model.vae.set_cond_stats(c_mat.mean(0), np.maximum(c_mat.std(0), 1e-3))


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint_payload(model: ScmModel, train_config_dict: dict | None = None
                       ) -> dict:
    # metadata goes through canonical JSON so the pickle stream is
    # byte-stable across save -> load -> save cycles
    meta = {
        "vae_preset": model.vae_preset,
        "graph_config": model.graph_config,
        "bases": {name: model.graph.mechanisms[name].base.to_dict()
                  for name in model.graph.scalar_names},
        "parent_domains": {name: list(mech.parent_domains)
                           for name, mech in model.spline_mechanisms.items()},
        "epoch": model.epoch,
        "metrics": model.metrics,
        "train_config": train_config_dict,
        "extra": model.extra,
    }
    return {
        "format_version": CHECKPOINT_VERSION,
        "meta_json": json.dumps(meta, sort_keys=True),
        "vae_state": model.vae.state_dict(),
        "mechanism_state": {name: mech.state_dict()
                            for name, mech in model.spline_mechanisms.items()},
    }


def save_checkpoint(model: ScmModel, path,
                    train_config_dict: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = checkpoint_payload(model, train_config_dict)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> ScmModel:
    path = Path(path)
    if not path.exists():
        raise DatasetIOError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DatasetIOError(
            f"unsupported checkpoint version {payload.get('format_version')!r}")
    meta = json.loads(payload["meta_json"])
    model = build_model(meta["vae_preset"], meta["graph_config"])
    model.vae.load_state_dict(payload["vae_state"])
    for name, state in payload["mechanism_state"].items():
        model.graph.mechanisms[name].load_state_dict(state)
        model.graph.mechanisms[name].parent_domains = \
            meta["parent_domains"][name]
    for name, base in meta["bases"].items():
        model.graph.mechanisms[name].set_base(BaseDistribution.from_dict(base))
    model.epoch = meta["epoch"]
    model.metrics = meta["metrics"]
    model.extra = meta.get("extra") or {}
    return model
