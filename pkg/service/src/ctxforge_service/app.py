"""HTTP service for paste integration.

Routes:

    POST /v1/integrate   conditioning bundle in, composite image out
    GET  /v1/health      {"status": "ok", "mode": ..., "model_loaded": ...}

The request bundle is JSON with base64 PNG fields "context" (RGB),
"mask" and "stitch" (grayscale, context-sized), "reference" (RGB), an
optional "coarse_feature" tensor object (257x1536 float32), and integer
"steps" and "seed".  A successful response carries {"image": base64
PNG sized like the context, "mode", "timing_ms"}.

Error contract: undecodable JSON or images answer 422, dimension
disagreements answer 400 with "got"/"expected" lists, and a service
running in "model" mode without a loaded checkpoint answers 503.  The
mode comes from create_app(mode=...) or the SERVICE_MODE environment
variable; "mock" composites with a deterministic feathered paste so
repeated requests are byte-identical.
"""

import argparse
import json
import os
import time
from typing import Any, Dict, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image
from starlette.exceptions import HTTPException as StarletteHTTPException

from ctxforge_service.wire import COARSE_SHAPE, decode_image, decode_tensor, encode_image

MODES = ("mock", "model")
DEFAULT_PORT = 8000
FEATHER = 4


def feathered_paste(
    context: np.ndarray,
    reference: np.ndarray,
    mask: np.ndarray,
    feather: int = FEATHER,
) -> np.ndarray:
    """Resize the reference onto the mask's bounding rectangle and blend
    it into the context with a linear alpha ramp `feather` pixels wide
    at the rectangle boundary.

    Pure function of its inputs: the mock backend leans on that for
    byte-stable responses.
    """
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return context.copy()
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    h, w = y1 - y0, x1 - x0
    with Image.fromarray(reference) as im:
        patch = np.asarray(im.resize((w, h), Image.Resampling.BILINEAR), dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist = np.minimum.reduce([ii, jj, h - 1 - ii, w - 1 - jj])
    alpha = np.minimum((dist + 1) / (feather + 1.0), 1.0)[..., None]
    out = context.astype(np.float64).copy()
    region = out[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = alpha * patch + (1.0 - alpha) * region
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _error(status: int, payload: Dict[str, Any]) -> JSONResponse:
    return JSONResponse(payload, status_code=status)


def _integrate(body: Dict[str, Any], mode: str) -> JSONResponse:
    try:
        context = decode_image(body["context"], channels=3)
        mask = decode_image(body["mask"], channels=1)
        stitch = decode_image(body["stitch"], channels=1)
        reference = decode_image(body["reference"], channels=3)
    except (KeyError, TypeError, ValueError, OSError) as exc:
        return _error(422, {"error": "image", "detail": f"undecodable: {exc}"})
    ch, cw = context.shape[:2]
    for field, plane in (("mask", mask), ("stitch", stitch)):
        if plane.shape != (ch, cw):
            return _error(
                400,
                {
                    "error": field,
                    "detail": f"{field} dimensions must match context",
                    "got": list(plane.shape),
                    "expected": [ch, cw],
                },
            )
    if body.get("coarse_feature") is not None:
        try:
            feature = decode_tensor(body["coarse_feature"])
        except (KeyError, TypeError, ValueError) as exc:
            return _error(400, {"error": "coarse_feature", "detail": str(exc)})
        if tuple(feature.shape) != COARSE_SHAPE:
            return _error(
                400,
                {
                    "error": "coarse_feature",
                    "detail": "wrong shape",
                    "got": list(feature.shape),
                    "expected": list(COARSE_SHAPE),
                },
            )
    if mode == "model":
        return _error(
            503,
            {
                "error": "model",
                "detail": "no generative checkpoint is loaded; "
                "run the service in mock mode",
            },
        )
    start = time.perf_counter()
    composite = feathered_paste(context, reference, mask > 127)
    return JSONResponse(
        {
            "image": encode_image(composite),
            "mode": mode,
            "timing_ms": (time.perf_counter() - start) * 1000.0,
        }
    )


def create_app(mode: Optional[str] = None) -> FastAPI:
    """Build the ASGI app.

    mode=None reads SERVICE_MODE from the environment and falls back to
    "mock".
    """
    if mode is None:
        mode = os.environ.get("SERVICE_MODE", "mock")
    if mode not in MODES:
        raise ValueError(f"unknown service mode '{mode}' (use 'mock' or 'model')")
    app = FastAPI(title="ctxforge-service", docs_url=None, redoc_url=None)
    app.state.mode = mode

    @app.post("/v1/integrate")
    async def integrate(request: Request) -> JSONResponse:
        try:
            body = json.loads(await request.body())
        except ValueError as exc:
            return _error(422, {"error": "body", "detail": str(exc)})
        if not isinstance(body, dict):
            return _error(
                422, {"error": "body", "detail": "request body must be a JSON object"}
            )
        return _integrate(body, app.state.mode)

    @app.get("/v1/health")
    async def health() -> JSONResponse:
        return JSONResponse(
            {"status": "ok", "mode": app.state.mode, "model_loaded": False}
        )

    async def http_error(request: Request, exc: StarletteHTTPException) -> JSONResponse:
        if exc.status_code == 404:
            return _error(404, {"error": "path", "detail": request.url.path})
        return _error(exc.status_code, {"error": "http", "detail": str(exc.detail)})

    app.add_exception_handler(StarletteHTTPException, http_error)
    return app


def main(argv: Optional[list] = None) -> int:
    import uvicorn

    parser = argparse.ArgumentParser(
        prog="ctxforge-service",
        description="serve the paste-integration API",
    )
    parser.add_argument(
        "--host", default="127.0.0.1", help="bind address (default 127.0.0.1)"
    )
    parser.add_argument(
        "--port", type=int, default=None,
        help=f"bind port (default: SERVICE_PORT or {DEFAULT_PORT})",
    )
    parser.add_argument(
        "--mode", choices=MODES, default=None,
        help="compositor backend (default: SERVICE_MODE or mock)",
    )
    args = parser.parse_args(argv)
    port = args.port
    if port is None:
        raw = os.environ.get("SERVICE_PORT", str(DEFAULT_PORT))
        try:
            port = int(raw)
        except ValueError:
            parser.error(f"SERVICE_PORT must be an integer, got '{raw}'")
    try:
        app = create_app(mode=args.mode)
    except ValueError as exc:
        parser.error(str(exc))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
