"""HTTP service exposing a trained run to viewers.

All endpoints are read-only over one loaded run; handlers are synchronous,
so FastAPI serves them from its threadpool and concurrent reads of the frozen
grids are safe. Responses for the same request are byte-identical to the
corresponding CLI artifacts because both sides share the pipeline helpers.
"""

from __future__ import annotations

import base64

import numpy as np
from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .decompose import DegenerateQueryError, Query, relevancy_map
from .pipeline import (
    DEFAULT_EVAL_SAMPLES,
    QueryRequest,
    RunContext,
    encode_png,
    load_run,
    render_frame,
    run_query,
)

__all__ = ["create_app"]


class RenderBody(BaseModel):
    view: int | None = None
    pose: list[float] | None = None
    n_samples: int = DEFAULT_EVAL_SAMPLES


class QueryBody(BaseModel):
    label: str | None = None
    rect: list[int] | None = None  # [view, x0, y0, x1, y1]
    embedding: list[float] | None = None
    modality: str = "language"
    threshold: float = 0.8
    edit: str = "extract"
    color: list[float] | None = None
    view: int | None = None
    n_samples: int = DEFAULT_EVAL_SAMPLES


def _png_response(data: bytes) -> Response:
    return Response(content=data, media_type="image/png")


def create_app(run_dir=None, ctx: RunContext | None = None) -> FastAPI:
    """Build the app for one run directory (or an already loaded context)."""
    if ctx is None:
        if run_dir is None:
            raise ValueError("create_app needs a run directory or a context")
        ctx = load_run(run_dir)
    ds = ctx.dataset

    app = FastAPI(title="mmfields", version="1")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(RequestValidationError)
    def _bad_body(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ValueError)
    def _bad_value(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(IndexError)
    def _bad_index(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(LookupError)
    def _missing(request, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.get("/scene")
    def scene_info():
        width, height = ds.image_size
        return {
            "n_views": ds.n_views,
            "width": width,
            "height": height,
            "train_views": list(ds.train_views),
            "test_views": list(ds.test_views),
            "near": ds.near,
            "far": ds.far,
            "labels": ds.label_table.labels if ds.label_table else [],
            "fg_labels": list(ds.fg_labels),
            "objects": ds.objects or [],
            "bbox_min": list(ctx.field.config.bbox_min),
            "bbox_max": list(ctx.field.config.bbox_max),
            "resolution": list(ctx.field.config.resolution),
        }

    @app.get("/gt/{view}")
    def ground_truth(view: int):
        if not 0 <= view < ds.n_views:
            raise IndexError(f"view {view} out of range [0, {ds.n_views})")
        return _png_response(encode_png(ds.images[view]))

    @app.get("/frames/{view}")
    def rendered_frame(view: int, n_samples: int = DEFAULT_EVAL_SAMPLES):
        frame = render_frame(ctx, view=view, n_samples=n_samples)
        return _png_response(encode_png(frame.rgb))

    @app.post("/render")
    def render_pose(body: RenderBody):
        pose = None
        if body.pose is not None:
            arr = np.asarray(body.pose, dtype=np.float64)
            if arr.size != 16:
                raise ValueError("pose must hold 16 floats (row-major 4x4)")
            pose = arr.reshape(4, 4)
        frame = render_frame(ctx, view=body.view, pose=pose, n_samples=body.n_samples)
        return _png_response(encode_png(frame.rgb))

    @app.post("/query")
    def query(body: QueryBody):
        req = QueryRequest(
            label=body.label,
            rect=tuple(body.rect) if body.rect is not None else None,
            embedding=body.embedding,
            modality=body.modality,
            threshold=body.threshold,
            edit=body.edit,
            color=tuple(body.color) if body.color is not None else None,
            view=body.view,
            n_samples=body.n_samples,
        )
        result = run_query(ctx, req)
        return {
            "render_png": base64.b64encode(encode_png(result.render)).decode("ascii"),
            "mask_png": base64.b64encode(encode_png(result.mask2d)).decode("ascii"),
            "stats": result.stats,
        }

    @app.get("/relevancy")
    def relevancy(view: int, label: str, modality: str = "language",
                  n_samples: int = DEFAULT_EVAL_SAMPLES):
        if ds.label_table is None:
            raise LookupError("this scene has no label table")
        if not 0 <= view < ds.n_views:
            raise IndexError(f"view {view} out of range [0, {ds.n_views})")
        try:
            q = Query(ds.label_table.get(label))
        except DegenerateQueryError as e:
            raise ValueError(str(e)) from e
        rel = relevancy_map(
            ctx.field, ds.cameras[view], q, modality,
            n_samples=n_samples, near=ds.near, far=ds.far,
        )
        return _png_response(encode_png(np.clip(rel, 0.0, 1.0)))

    return app
