"""HTTP client for the diffusion-integration service, plus the wire codec
and an in-process stub transport.

Wire format (JSON over HTTP/1.1, UTF-8):

POST /v1/integrate
  request body:
    context:  base64 PNG, RGB
    mask:     base64 PNG, single channel, nonzero inside the placement
    stitch:   base64 PNG, single channel, the conditioning collage
    reference: base64 PNG, RGB
    coarse_feature: optional {"shape": [257, 1536], "dtype": "float32",
                    "data": base64 of row-major little-endian bytes}
    steps:    integer >= 1
    seed:     integer
  response body: {"image": base64 PNG RGB, "mode": "model"|"mock",
                  "timing_ms": float}
  errors: 400 shape violation (body: {"error": field, "detail": ...,
          "got": shape, "expected": shape}), 422 undecodable image,
          503 model unavailable.

GET /v1/health -> {"status": "ok", "mode": ..., "model_loaded": bool}
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
from typing import Any, Dict, Optional

import httpx
import numpy as np
from PIL import Image

from ctxforge.compositing import COARSE_FEATURE_SHAPE, ConditioningBundle
from ctxforge.errors import DataError, ProtocolError, ServiceError

DEFAULT_TIMEOUT = 120.0
DEFAULT_RETRIES = 2
DEFAULT_POOL = 4


def png_encode(arr: np.ndarray) -> bytes:
    """uint8 grayscale or RGB array to PNG bytes."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG")
    return buf.getvalue()


def png_decode(data: bytes, channels: int) -> np.ndarray:
    """PNG bytes to uint8 array with 1 or 3 channels."""
    with Image.open(io.BytesIO(data)) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        return np.asarray(im)


def b64_png(arr: np.ndarray) -> str:
    return base64.b64encode(png_encode(arr)).decode("ascii")


def unb64_png(text: str, channels: int) -> np.ndarray:
    return png_decode(base64.b64decode(text), channels)


def encode_coarse(feature: np.ndarray) -> Dict[str, Any]:
    arr = np.ascontiguousarray(feature, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "dtype": "float32",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_coarse(obj: Dict[str, Any]) -> np.ndarray:
    shape = tuple(obj["shape"])
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ProtocolError(
            f"coarse_feature payload holds {arr.size} values, shape {shape} "
            f"needs {int(np.prod(shape))}"
        )
    return arr.reshape(shape)


def encode_request(bundle: ConditioningBundle, steps: int, seed: int) -> Dict[str, Any]:
    """Serialize one placement's bundle into the request body."""
    body: Dict[str, Any] = {
        "context": b64_png(bundle.context_pixels),
        "mask": b64_png(bundle.region_mask.astype(np.uint8) * 255),
        "stitch": base64.b64encode(bundle.stitch.to_png_bytes()).decode("ascii"),
        "reference": b64_png(bundle.reference_pixels),
        "steps": int(steps),
        "seed": int(seed),
    }
    if bundle.coarse_feature is not None:
        body["coarse_feature"] = encode_coarse(bundle.coarse_feature)
    return body


class IntegrationClient:
    """Talks to the integration endpoint; bounded concurrency, retries on
    transport failures, shape-checked responses."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        pool: int = DEFAULT_POOL,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.retries = int(retries)
        self._gate = threading.BoundedSemaphore(int(pool))
        self._http = httpx.Client(
            base_url=self.endpoint, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "IntegrationClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, method: str, path: str, **kw) -> httpx.Response:
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                with self._gate:
                    return self._http.request(method, path, **kw)
            except httpx.TransportError as exc:
                last = exc
        raise ServiceError(
            f"{method} {path} failed after {self.retries + 1} attempts: {last}"
        )

    def health(self) -> Dict[str, Any]:
        resp = self._request("GET", "/v1/health")
        if resp.status_code != 200:
            raise ServiceError(f"health check returned {resp.status_code}")
        return resp.json()

    def integrate(
        self, bundle: ConditioningBundle, steps: int = 50, seed: int = 0
    ) -> np.ndarray:
        if bundle.coarse_feature is not None:
            shape = tuple(bundle.coarse_feature.shape)
            if shape != COARSE_FEATURE_SHAPE:
                raise DataError(
                    f"coarse_feature shape {shape} must be {COARSE_FEATURE_SHAPE}"
                )
        body = encode_request(bundle, steps=steps, seed=seed)
        resp = self._request("POST", "/v1/integrate", json=body)
        if resp.status_code != 200:
            detail: Any
            try:
                detail = resp.json()
            except ValueError:
                detail = resp.text[:200]
            raise ServiceError(
                f"integration request returned {resp.status_code}: {detail}"
            )
        payload = resp.json()
        try:
            pixels = unb64_png(payload["image"], channels=3)
        except (KeyError, ValueError, OSError) as exc:
            raise ProtocolError(f"undecodable image in service response: {exc}")
        return pixels


def _feathered_paste(
    context: np.ndarray, reference: np.ndarray, mask: np.ndarray, feather: int = 4
) -> np.ndarray:
    """Deterministic stand-in composite: resize the reference onto the mask's
    bounding rectangle and blend with a linear alpha ramp `feather` pixels
    wide at the rectangle boundary."""
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


def _json_response(status: int, payload: Dict[str, Any]) -> httpx.Response:
    return httpx.Response(status, json=payload)


def _stub_integrate(body: Dict[str, Any]) -> httpx.Response:
    try:
        context = unb64_png(body["context"], channels=3)
        mask = unb64_png(body["mask"], channels=1)
        stitch = unb64_png(body["stitch"], channels=1)
        reference = unb64_png(body["reference"], channels=3)
    except (KeyError, ValueError, OSError) as exc:
        return _json_response(422, {"error": "image", "detail": f"undecodable: {exc}"})
    ch, cw = context.shape[:2]
    for field, arr in (("mask", mask), ("stitch", stitch)):
        if arr.shape != (ch, cw):
            return _json_response(
                400,
                {
                    "error": field,
                    "detail": f"{field} dimensions must match context",
                    "got": list(arr.shape),
                    "expected": [ch, cw],
                },
            )
    if "coarse_feature" in body and body["coarse_feature"] is not None:
        try:
            feature = decode_coarse(body["coarse_feature"])
        except (ProtocolError, KeyError, ValueError) as exc:
            return _json_response(
                400, {"error": "coarse_feature", "detail": str(exc)}
            )
        if tuple(feature.shape) != COARSE_FEATURE_SHAPE:
            return _json_response(
                400,
                {
                    "error": "coarse_feature",
                    "detail": "wrong shape",
                    "got": list(feature.shape),
                    "expected": list(COARSE_FEATURE_SHAPE),
                },
            )
    start = time.perf_counter()
    composite = _feathered_paste(context, reference, mask > 127)
    return _json_response(
        200,
        {
            "image": b64_png(composite),
            "mode": "mock",
            "timing_ms": (time.perf_counter() - start) * 1000.0,
        },
    )


def local_mock_transport() -> httpx.MockTransport:
    """In-process transport speaking the integration wire schema.

    Lets the diffusion backend run without a server or sockets: the
    handler validates requests the way the service does and answers with
    the deterministic feathered-paste composite.
    """

    def handler(request: httpx.Request) -> httpx.Response:
        if request.url.path == "/v1/health":
            return _json_response(
                200, {"status": "ok", "mode": "mock", "model_loaded": False}
            )
        if request.url.path == "/v1/integrate" and request.method == "POST":
            try:
                body = json.loads(request.content.decode("utf-8"))
            except ValueError as exc:
                return _json_response(422, {"error": "body", "detail": str(exc)})
            return _stub_integrate(body)
        return _json_response(404, {"error": "path", "detail": str(request.url.path)})

    return httpx.MockTransport(handler)


def local_client(**kw) -> IntegrationClient:
    """Client wired to the in-process stub; accepts IntegrationClient kwargs."""
    kw.setdefault("endpoint", "http://ctxforge.local")
    return IntegrationClient(transport=local_mock_transport(), **kw)
