"""HTTP inference service (schema v1).

Serves one immutable trained model plus a dataset index. Requests never
mutate server state, so concurrent counterfactual queries are safe.

Endpoints:
  GET  /model/info                      model, graph, and slider-range info
  GET  /observations?page=&page_size=   paged record summaries
  GET  /observations/{id}/thumbnail.png gallery thumbnail
  POST /counterfactual                  abduct/act/predict on one observation
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel, Field

from .errors import (
    AbductionRangeError,
    InterventionRangeError,
    InvalidRecordError,
    UnknownVariableError,
    UnsupportedInterventionError,
)
from .graph import CovariateRecord
from .model import ScmModel
from .phantom import PhantomConfig, PhantomRecord, oracle_segment_lesions
from .pngio import (
    DIFF_SCALE,
    DISPLAY_CLIP,
    decode_intensity_png,
    encode_diff_png,
    encode_intensity_png,
    from_base64,
    thumbnail_png,
    to_base64,
)

SCHEMA_VERSION = "v1"


class InlineObservation(BaseModel):
    covariates: dict[str, float]
    image_png_base64: str


class CounterfactualOptions(BaseModel):
    return_diff: bool = True
    deterministic: bool = True


class CounterfactualRequest(BaseModel):
    observation_id: int | None = None
    inline: InlineObservation | None = None
    interventions: dict[str, float] = Field(default_factory=dict)
    options: CounterfactualOptions = Field(default_factory=CounterfactualOptions)


@dataclass
class ServerState:
    model: ScmModel | None
    records: list[PhantomRecord] = field(default_factory=list)
    phantom_config: PhantomConfig | None = None


def _json_bound(value: float) -> float | None:
    return None if not math.isfinite(value) else float(value)


def _variable_payload(state: ServerState) -> list[dict]:
    graph = state.model.graph
    columns = {name: [getattr(r.covariates, name) for r in state.records]
               for name in graph.scalar_names}
    out = []
    for spec in graph.variables:
        observed = None
        if spec.kind != "image" and columns.get(spec.name):
            observed = {"lo": float(min(columns[spec.name])),
                        "hi": float(max(columns[spec.name]))}
        out.append({
            "name": spec.name,
            "kind": spec.kind,
            "unit": spec.unit,
            "parents": list(spec.parents),
            "support": {"lo": _json_bound(spec.support[0]),
                        "hi": _json_bound(spec.support[1]),
                        "lo_open": spec.lo_open},
            "observed_range": observed,
            "intervenable": spec.kind != "image",
        })
    return out


def create_app(state: ServerState) -> FastAPI:
    app = FastAPI(title="counterfactual inference service")

    def require_model() -> ScmModel:
        if state.model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        return state.model

    @app.get("/model/info")
    def model_info():
        model = require_model()
        cfg = model.vae.cfg
        return {
            "schema_version": SCHEMA_VERSION,
            "image_size": cfg.image_size,
            "display_clip": DISPLAY_CLIP,
            "diff_scale": DIFF_SCALE,
            "latents": {"k": cfg.k, "flat": cfg.flat_dim,
                        "m": cfg.m, "n": cfg.n},
            "conditioning": list(model.vae.cond_vars),
            "variables": _variable_payload(state),
            "observation_count": len(state.records),
            "epoch": model.epoch,
        }

    @app.get("/observations")
    def observations(page: int = 0, page_size: int = 24):
        require_model()
        if page < 0 or page_size <= 0:
            raise HTTPException(status_code=400, detail="bad paging")
        start = page * page_size
        chunk = state.records[start:start + page_size]
        entries = []
        for offset, rec in enumerate(chunk):
            rid = start + offset
            seg_volume = None
            if state.phantom_config is not None:
                _, seg_volume = oracle_segment_lesions(
                    rec.image, rec.brain_mask, state.phantom_config)
            entries.append({
                "id": rid,
                "covariates": rec.covariates.to_dict(),
                "thumbnail": f"/observations/{rid}/thumbnail.png",
                "segmented_lesion_volume": seg_volume,
            })
        return {"total": len(state.records), "page": page,
                "page_size": page_size, "records": entries}

    @app.get("/observations/{rid}/thumbnail.png")
    def thumbnail(rid: int):
        require_model()
        if not 0 <= rid < len(state.records):
            raise HTTPException(status_code=404,
                                detail=f"unknown observation {rid}")
        data = thumbnail_png(state.records[rid].image)
        return Response(content=data, media_type="image/png")

    @app.post("/counterfactual")
    def run_counterfactual(request: CounterfactualRequest):
        model = require_model()
        started = time.perf_counter()
        if request.observation_id is None and request.inline is None:
            raise HTTPException(
                status_code=400,
                detail={"error": "need observation_id or inline observation"})
        if request.observation_id is not None:
            rid = request.observation_id
            if not 0 <= rid < len(state.records):
                raise HTTPException(status_code=404,
                                    detail=f"unknown observation {rid}")
            record = state.records[rid].covariates
            image = state.records[rid].image
        else:
            try:
                record = CovariateRecord.from_dict(request.inline.covariates)
                image = decode_intensity_png(
                    from_base64(request.inline.image_png_base64))
            except (KeyError, ValueError) as exc:
                raise HTTPException(status_code=400,
                                    detail={"error": str(exc)})
        try:
            cf_record, cf_image = model.counterfactual(
                record, image, request.interventions,
                deterministic=request.options.deterministic)
        except (UnknownVariableError, UnsupportedInterventionError) as exc:
            raise HTTPException(status_code=400, detail={
                "error": str(exc), "variable": _first_bad_name(
                    model, request.interventions)})
        except InterventionRangeError as exc:
            raise HTTPException(status_code=400, detail={
                "error": str(exc), "variable": exc.variable})
        except (InvalidRecordError, AbductionRangeError) as exc:
            raise HTTPException(status_code=400, detail={"error": str(exc)})

        cf_image = np.asarray(cf_image, dtype=np.float32)
        original = np.asarray(image, dtype=np.float32)
        diff = cf_image.astype(np.float64) - original.astype(np.float64)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "covariates_before": record.to_dict()
            if isinstance(record, CovariateRecord) else dict(record),
            "covariates_after": cf_record.to_dict(),
            "interventions": dict(request.interventions),
            "image_original": to_base64(encode_intensity_png(original)),
            "image_counterfactual": to_base64(encode_intensity_png(cf_image)),
            "latency_ms": (time.perf_counter() - started) * 1000.0,
        }
        if request.options.return_diff:
            payload["image_diff"] = to_base64(encode_diff_png(diff))
            payload["diff_max_abs"] = float(np.abs(diff).max())
        return payload

    return app


def _first_bad_name(model: ScmModel, interventions: dict) -> str | None:
    names = set(model.graph.names)
    for name in interventions:
        if name not in names or name == model.graph.image_var:
            return name
    return None


def serve(model: ScmModel, records, phantom_config, port: int,
          host: str = "127.0.0.1") -> None:
    import uvicorn

    app = create_app(ServerState(model=model, records=list(records),
                                 phantom_config=phantom_config))
    uvicorn.run(app, host=host, port=port, log_level="info")
