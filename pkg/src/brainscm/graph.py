"""Causal graph over the covariates and the image, with the
abduction / action / prediction machinery for counterfactual inference.

The default graph has nine variables: age ``a``, sex ``s``, symptom duration
``d``, disability score ``e``, brain volume ``b``, ventricle volume ``v``,
lesion volume ``l``, slice index ``n``, and the image ``x``. Scalar parents
feed conditional spline-flow mechanisms; the image mechanism is a conditional
VAE attached after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np
import torch
import yaml

from .errors import (
    AbductionRangeError,
    GraphInvalidError,
    InterventionRangeError,
    InvalidRecordError,
    MechanismDomainError,
    UninitializedModelError,
    UnknownVariableError,
    UnsupportedInterventionError,
)
from .mechanisms import (
    BaseDistribution,
    ConstantMechanism,
    DirectMechanism,
    SplineFlowMechanism,
)

COVARIATE_NAMES = ("a", "s", "d", "e", "b", "v", "l", "n")

# offset used when mapping a discrete observed value into the continuous
# modeling domain outside training (training draws fresh uniform noise)
DETERMINISTIC_DEQUANT_OFFSET = 0.5


@dataclass(frozen=True)
class VariableSpec:
    """One endogenous variable: its kind, unit, parents, and value range."""

    name: str
    kind: str  # continuous-positive | binary | discrete-count | image
    unit: str = ""
    parents: tuple[str, ...] = ()
    support: tuple[float, float] = (-math.inf, math.inf)
    lo_open: bool = False

    def check_assignment(self, value: float) -> None:
        if not math.isfinite(value):
            raise InterventionRangeError(self.name, "value must be finite")
        if self.kind == "binary":
            if value not in (0.0, 1.0):
                raise InterventionRangeError(self.name, "binary value must be 0 or 1")
            return
        lo, hi = self.support
        if self.kind == "discrete-count" and value != math.floor(value):
            raise InterventionRangeError(self.name, "value must be an integer")
        # support is [lo, hi] with an optionally open lower end
        if value < lo or (self.lo_open and value == lo) or value > hi:
            raise InterventionRangeError(
                self.name, f"value {value} outside range "
                f"{'(' if self.lo_open else '['}{lo}, {hi}]")


@dataclass
class CovariateRecord:
    """One subject-slice's scalar covariates, in observed (raw) units."""

    a: float  # age, years
    s: float  # sex, 0 male / 1 female
    d: float  # symptom duration, years
    e: float  # disability score, 0-10 scale
    b: float  # brain volume, mL
    v: float  # ventricle volume, mL
    l: float  # lesion volume, mL
    n: float  # axial slice index

    def validate(self) -> None:
        vals = self.to_dict()
        for name, value in vals.items():
            if not math.isfinite(value):
                raise InvalidRecordError(f"{name} must be finite, got {value}")
        if self.a <= 0:
            raise InvalidRecordError(f"age must be positive, got {self.a}")
        if not 0 <= self.s < 2:
            raise InvalidRecordError(f"sex must lie in [0, 2), got {self.s}")
        if self.d < 0:
            raise InvalidRecordError(f"duration must be >= 0, got {self.d}")
        if not 0 <= self.e < 11:
            raise InvalidRecordError(f"disability score out of range: {self.e}")
        if self.b <= 0 or self.v <= 0:
            raise InvalidRecordError("brain and ventricle volumes must be positive")
        if self.v >= self.b:
            raise InvalidRecordError(
                f"ventricle volume {self.v} must be smaller than brain volume {self.b}")
        if self.l < 0:
            raise InvalidRecordError(f"lesion volume must be >= 0, got {self.l}")
        if self.n < 0:
            raise InvalidRecordError(f"slice index must be >= 0, got {self.n}")

    def to_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in COVARIATE_NAMES}

    @classmethod
    def from_dict(cls, values: Mapping[str, float]) -> "CovariateRecord":
        return cls(**{k: float(values[k]) for k in COVARIATE_NAMES})


@dataclass
class Intervention:
    """A do() assignment: variable name -> held value (observed units)."""

    assignments: dict[str, float] = field(default_factory=dict)

    def validate(self, graph: "CausalGraph") -> None:
        for name, value in self.assignments.items():
            spec = graph.spec(name)
            if spec.kind == "image":
                raise UnsupportedInterventionError(
                    "interventions on the image variable are not supported")
            spec.check_assignment(float(value))

    def is_empty(self) -> bool:
        return not self.assignments


@dataclass
class ExogenousRecord:
    """Abducted background variables: one scalar per covariate plus the
    image's latent-code / residual pair."""

    scalars: dict[str, float]
    image: Any = None


@dataclass
class CausalGraph:
    """Ordered variable declarations plus one mechanism per variable."""

    variables: list[VariableSpec]
    mechanisms: dict[str, Any]
    dequantized: frozenset[str] = frozenset()

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise GraphInvalidError("duplicate variable names")
        declared = set(names)
        for spec in self.variables:
            for p in spec.parents:
                if p not in declared:
                    raise GraphInvalidError(
                        f"{spec.name} references undeclared parent {p!r}")
        image_vars = [v.name for v in self.variables if v.kind == "image"]
        if len(image_vars) > 1:
            raise GraphInvalidError("at most one image variable is supported")
        for spec in self.variables:
            if any(self.spec(p).kind == "image" for p in spec.parents):
                raise GraphInvalidError("the image variable may not have children")
        # raises on cycles
        topological_order(self)

    def spec(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise UnknownVariableError(f"unknown variable {name!r}")

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def image_var(self) -> str | None:
        for v in self.variables:
            if v.kind == "image":
                return v.name
        return None

    @property
    def scalar_names(self) -> list[str]:
        return [v.name for v in self.variables if v.kind != "image"]

    def mechanism(self, name: str):
        mech = self.mechanisms.get(name)
        if mech is None:
            raise UninitializedModelError(f"mechanism for {name!r} is not initialized")
        return mech


def topological_order(graph: CausalGraph) -> list[str]:
    """Parents-before-children order; ties broken by declaration order."""
    names = [v.name for v in graph.variables]
    index = {n: i for i, n in enumerate(names)}
    indegree = {v.name: len(v.parents) for v in graph.variables}
    children: dict[str, list[str]] = {n: [] for n in names}
    for v in graph.variables:
        for p in v.parents:
            children[p].append(v.name)
    ready = sorted([n for n, deg in indegree.items() if deg == 0],
                   key=index.__getitem__)
    order: list[str] = []
    while ready:
        current = ready.pop(0)
        order.append(current)
        changed = False
        for child in children[current]:
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
                changed = True
        if changed:
            ready.sort(key=index.__getitem__)
    if len(order) != len(names):
        stuck = sorted(set(names) - set(order))
        raise GraphInvalidError(f"graph contains a cycle through {stuck}")
    return order


def _to_model_value(graph: CausalGraph, name: str, value: float) -> float:
    """Observed -> modeling domain.

    Integer-valued discrete observations are dequantized at the interval
    midpoint (deterministic); fractional values are taken as already
    dequantized and pass through, so sampled records round-trip exactly.
    """
    if name in graph.dequantized and value == math.floor(value):
        return float(value) + DETERMINISTIC_DEQUANT_OFFSET
    return float(value)


def _to_observed_value(graph: CausalGraph, name: str, value: float) -> float:
    # exact midpoints only ever come from _to_model_value, so flooring them
    # restores the original integer observation
    if name in graph.dequantized and value - math.floor(value) == \
            DETERMINISTIC_DEQUANT_OFFSET:
        return float(math.floor(value))
    return float(value)


def _parent_vector(graph: CausalGraph, name: str,
                   model_values: dict[str, float]) -> list[float] | None:
    parents = graph.spec(name).parents
    if not parents:
        return None
    return [model_values[p] for p in parents]


def _conditioning_vector(image_mech, model_values: dict[str, float]) -> np.ndarray:
    return np.array([model_values[c] for c in image_mech.cond_vars], dtype=np.float64)


def _as_record_dict(observation) -> dict[str, float]:
    if isinstance(observation, CovariateRecord):
        observation.validate()
        return observation.to_dict()
    return {k: float(v) for k, v in dict(observation).items()}


def abduct(graph: CausalGraph, observation, image=None,
           sample_generator=None) -> ExogenousRecord:
    """Infer every background variable from an observed record (and image).

    Scalar abduction is an exact inverse and always deterministic; passing a
    ``sample_generator`` switches the image posterior from its mean to a
    sample.
    """
    values = _as_record_dict(observation)
    scalars: dict[str, float] = {}
    model_values: dict[str, float] = {
        name: _to_model_value(graph, name, values[name])
        for name in graph.scalar_names
    }
    for name in topological_order(graph):
        spec = graph.spec(name)
        if spec.kind == "image":
            continue
        mech = graph.mechanism(name)
        parents = _parent_vector(graph, name, model_values)
        try:
            scalars[name] = float(mech.invert(model_values[name], parents))
        except MechanismDomainError as exc:
            raise AbductionRangeError(name, str(exc)) from exc
    image_exo = None
    if graph.image_var is not None and image is not None:
        mech = graph.mechanism(graph.image_var)
        if not getattr(mech, "initialized", True):
            raise UninitializedModelError("image mechanism is not trained")
        image_exo = mech.abduct(image, _conditioning_vector(mech, model_values),
                                generator=sample_generator)
    return ExogenousRecord(scalars=scalars, image=image_exo)


def intervene(graph: CausalGraph, intervention: Intervention) -> CausalGraph:
    """Mutilate: cut incoming edges and pin each assigned variable.

    Mechanisms of non-intervened variables are shared by reference, so their
    parameters are untouched.
    """
    intervention.validate(graph)
    new_vars = []
    new_mechs = dict(graph.mechanisms)
    for spec in graph.variables:
        if spec.name in intervention.assignments:
            raw = float(intervention.assignments[spec.name])
            new_vars.append(replace(spec, parents=()))
            new_mechs[spec.name] = ConstantMechanism(
                _to_model_value(graph, spec.name, raw))
        else:
            new_vars.append(spec)
    return CausalGraph(variables=new_vars, mechanisms=new_mechs,
                       dequantized=graph.dequantized)


def descendants(graph: CausalGraph, roots: set[str]) -> set[str]:
    """All variables reachable from ``roots`` along directed edges."""
    children: dict[str, list[str]] = {v.name: [] for v in graph.variables}
    for v in graph.variables:
        for p in v.parents:
            children[p].append(v.name)
    out: set[str] = set()
    frontier = list(roots)
    while frontier:
        current = frontier.pop()
        for child in children[current]:
            if child not in out:
                out.add(child)
                frontier.append(child)
    return out


def predict_from_exogenous(graph: CausalGraph, exo: ExogenousRecord,
                           baseline: dict[str, float] | None = None,
                           recompute: set[str] | None = None,
                           baseline_image=None):
    """Forward pass: recompute variables from their noise in topo order.

    With a ``baseline`` (the abducted observation in modeling units), only
    the names in ``recompute`` go through their mechanisms; everything else
    keeps its observed value verbatim, which is the single-world guarantee
    that non-descendants of an intervention are untouched.
    """
    model_values: dict[str, float] = {}
    image = None
    for name in topological_order(graph):
        spec = graph.spec(name)
        untouched = baseline is not None and recompute is not None \
            and name not in recompute
        if spec.kind == "image":
            if untouched:
                image = baseline_image
                continue
            if exo.image is None:
                continue
            mech = graph.mechanism(name)
            c = _conditioning_vector(mech, model_values)
            image = mech.decode_exogenous(exo.image, c)
            continue
        if untouched:
            model_values[name] = baseline[name]
            continue
        mech = graph.mechanism(name)
        parents = _parent_vector(graph, name, model_values)
        model_values[name] = float(mech.forward_value(exo.scalars.get(name, 0.0),
                                                      parents))
    observed = {name: _to_observed_value(graph, name, value)
                for name, value in model_values.items()}
    if set(observed) == set(COVARIATE_NAMES):
        return CovariateRecord.from_dict(observed), image
    return observed, image


def counterfactual(graph: CausalGraph, observation, intervention: Intervention,
                   sample_generator=None):
    """Abduction, action, prediction in sequence.

    ``observation`` is a (record, image) pair; the image may be None when the
    graph has no trained image mechanism. Non-descendants of the intervened
    variables keep their observed values exactly.
    """
    record, image = observation
    intervention.validate(graph)
    exo = abduct(graph, record, image, sample_generator=sample_generator)
    mutilated = intervene(graph, intervention)
    targets = set(intervention.assignments)
    affected = targets | descendants(graph, targets)
    values = _as_record_dict(record)
    baseline = {name: _to_model_value(graph, name, values[name])
                for name in graph.scalar_names}
    return predict_from_exogenous(mutilated, exo, baseline=baseline,
                                  recompute=affected, baseline_image=image)


def strip_image(graph: CausalGraph) -> CausalGraph:
    """A view of the graph restricted to the scalar covariates."""
    keep = [v for v in graph.variables if v.kind != "image"]
    mechs = {v.name: graph.mechanisms[v.name] for v in keep}
    return CausalGraph(variables=keep, mechanisms=mechs,
                       dequantized=graph.dequantized)


def ancestral_sample(graph: CausalGraph, count: int, seed: int):
    """Draw records (and images) from the generative model."""
    if graph.image_var is not None:
        mech = graph.mechanism(graph.image_var)
        if not getattr(mech, "initialized", True):
            raise UninitializedModelError("image mechanism is not trained")
    gen = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(count):
        exo_scalars: dict[str, float] = {}
        image_exo = None
        for name in topological_order(graph):
            spec = graph.spec(name)
            mech = graph.mechanism(name)
            if spec.kind == "image":
                image_exo = mech.sample_exogenous(gen)
            else:
                exo_scalars[name] = float(mech.sample_u(1, gen)[0])
        out.append(predict_from_exogenous(
            graph, ExogenousRecord(scalars=exo_scalars, image=image_exo)))
    return out


# ---------------------------------------------------------------------------
# default graph declaration

DEFAULT_GRAPH_CONFIG: dict = {
    "variables": [
        {"name": "s", "kind": "binary", "unit": "index"},
        {"name": "n", "kind": "discrete-count", "unit": "index",
         "support": [0, 59]},
        {"name": "a", "kind": "continuous-positive", "unit": "years",
         "support": [0, math.inf], "lo_open": True},
        {"name": "d", "kind": "continuous-positive", "unit": "years",
         "parents": ["a", "s"], "support": [0, math.inf]},
        {"name": "e", "kind": "continuous-positive", "unit": "score",
         "parents": ["s", "d"], "support": [0, 10.0]},
        {"name": "b", "kind": "continuous-positive", "unit": "mL",
         "parents": ["a", "s"], "support": [0, math.inf], "lo_open": True},
        {"name": "v", "kind": "continuous-positive", "unit": "mL",
         "parents": ["a", "b"], "support": [0, math.inf], "lo_open": True},
        {"name": "l", "kind": "continuous-positive", "unit": "mL",
         "parents": ["d", "e", "v", "b"], "support": [0, math.inf]},
        {"name": "x", "kind": "image", "unit": "intensity",
         "parents": ["b", "v", "l", "n"]},
    ],
    "options": {"dequantize": ["s", "n"]},
    "mechanisms": {"num_bins": 8, "tail_bound": 3.0, "hidden": 32},
}


def _specs_from_config(config: dict) -> list[VariableSpec]:
    specs = []
    for entry in config["variables"]:
        support = tuple(entry.get("support", (-math.inf, math.inf)))
        specs.append(VariableSpec(
            name=entry["name"], kind=entry["kind"], unit=entry.get("unit", ""),
            parents=tuple(entry.get("parents", ())),
            support=(float(support[0]), float(support[1])),
            lo_open=bool(entry.get("lo_open", False))))
    return specs


def build_graph(config: dict | None = None) -> CausalGraph:
    """Construct a graph (spline mechanisms for scalars, image slot empty)."""
    config = config or DEFAULT_GRAPH_CONFIG
    specs = _specs_from_config(config)
    opts = config.get("options", {})
    mech_cfg = config.get("mechanisms", {})
    num_bins = int(mech_cfg.get("num_bins", 8))
    tail_bound = float(mech_cfg.get("tail_bound", 3.0))
    hidden = int(mech_cfg.get("hidden", 32))

    by_name = {s.name: s for s in specs}
    mechanisms: dict[str, Any] = {}
    for spec in specs:
        if spec.kind == "image":
            mechanisms[spec.name] = None
        elif spec.kind == "binary":
            mechanisms[spec.name] = DirectMechanism(
                BaseDistribution("bernoulli", p=0.5), sample_jitter=True)
        elif spec.kind == "discrete-count":
            lo, hi = spec.support
            # support is inclusive; dequantized values live in [lo, hi + 1)
            hi = lo + 1.0 if not math.isfinite(hi) else hi + 1.0
            mechanisms[spec.name] = DirectMechanism(
                BaseDistribution("uniform", lo=lo, hi=hi))
        else:
            mech = SplineFlowMechanism(
                len(spec.parents), transform_domain="log",
                num_bins=num_bins, tail_bound=tail_bound, hidden=hidden)
            mech.parent_domains = [
                "log" if by_name[p].kind == "continuous-positive" else "identity"
                for p in spec.parents]
            mechanisms[spec.name] = mech
    return CausalGraph(
        variables=specs, mechanisms=mechanisms,
        dequantized=frozenset(opts.get("dequantize", ())))


def build_default_graph(ventricle_parents: tuple[str, ...] = ("a", "b")) -> CausalGraph:
    """The standard nine-variable graph; ventricle parents are configurable
    because the source DAG admits both {a, b} and {a, b, d}."""
    config = {**DEFAULT_GRAPH_CONFIG,
              "variables": [dict(v) for v in DEFAULT_GRAPH_CONFIG["variables"]]}
    for entry in config["variables"]:
        if entry["name"] == "v":
            entry["parents"] = list(ventricle_parents)
    return build_graph(config)


def load_graph_config(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh)


def graph_config_to_yaml(config: dict) -> str:
    return yaml.safe_dump(config, sort_keys=False)
