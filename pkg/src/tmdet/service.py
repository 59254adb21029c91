"""HTTP detection service and the request/response core it shares with the
CLI detect path (so both produce identical detection lists).

Endpoints: POST /detect, GET /healthz, GET /model, POST /images (raw PNG
upload, replies with an id), GET /images/{id}. The model snapshot is
read-only for the server lifetime; request handling is threaded and
stateless apart from the uploaded-image store.
"""
from __future__ import annotations

import base64
import copy
import hashlib
import io
import json
import threading
import time
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import __version__
from .boxes import BoxXYWH
from .infer import Detection, InferConfig, detect_multi_scale
from .matching import MatchVariant
from .model import Model

MAX_UPLOAD_BYTES = 16 * 1024 * 1024
DEFAULT_TAU = 0.4


class RequestError(ValueError):
    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


def supported_variants(model: Model) -> List[str]:
    depth = model.cfg.feature_depth
    head = model.cfg.head_depth
    return [v.value for v in MatchVariant if v.head_depth(depth) == head]


def variant_views(model: Model) -> Dict[str, Model]:
    """Shallow model views sharing parameters, one per runnable variant."""
    views = {}
    for name in supported_variants(model):
        variant = MatchVariant(name)
        if variant == model.cfg.match_variant:
            views[name] = model
        else:
            view = copy.copy(model)
            view.cfg = replace(model.cfg, match_variant=variant)
            views[name] = view
    return views


def clamp_to_image(det: Detection, width: int, height: int) -> Optional[Detection]:
    b = det.box
    x1, x2 = max(b.x1, 0.0), min(b.x2, float(width))
    y1, y2 = max(b.y1, 0.0), min(b.y2, float(height))
    if x2 - x1 <= 0.0 or y2 - y1 <= 0.0:
        return None
    box = BoxXYWH((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)
    return replace(det, box=box)


def parse_exemplars(raw) -> List[BoxXYWH]:
    if not isinstance(raw, (list, tuple)) or len(raw) == 0:
        raise RequestError("at least one exemplar [cx, cy, w, h] is required")
    out = []
    for entry in raw:
        try:
            out.append(BoxXYWH.from_array(entry))
        except (TypeError, ValueError) as exc:
            raise RequestError(f"bad exemplar {entry!r}: {exc}") from exc
    return out


def run_detection(views: Dict[str, Model], image: np.ndarray,
                  exemplars: Sequence[BoxXYWH], tau: Optional[float],
                  scales: Optional[Sequence[int]], variant: Optional[str],
                  aggregate: bool = True) -> dict:
    """The shared CLI/service detection core; returns the response dict."""
    name = variant or next(iter(views))
    if name not in views:
        raise RequestError(f"unsupported variant {name!r}; this model supports "
                           f"{sorted(views)}")
    model = views[name]
    if tau is not None and not (0.0 < tau < 1.0):
        raise RequestError(f"tau must be in (0, 1), got {tau}")
    cfg = InferConfig(tau=DEFAULT_TAU if tau is None else float(tau),
                      scales=[int(s) for s in scales] if scales else None)
    used = list(exemplars) if aggregate else [exemplars[0]]
    t0 = time.perf_counter()
    dets = detect_multi_scale(model, image.astype(model.cfg.np_dtype), used, cfg)
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    h, w = image.shape[:2]
    clamped = [c for d in dets if (c := clamp_to_image(d, w, h)) is not None]
    return {
        "detections": [{"box": [d.box.cx, d.box.cy, d.box.w, d.box.h],
                        "score": d.score, "exemplar_id": d.exemplar_id,
                        "scale_id": d.scale_id} for d in clamped],
        "timing_ms": elapsed_ms,
        "model_version": __version__,
    }


def decode_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise RequestError(f"could not decode image: {exc}") from exc


class DetectionService:
    """Owns the model views and the uploaded-image store."""

    def __init__(self, model: Model, default_tau: float = DEFAULT_TAU):
        self.views = variant_views(model)
        self.model = model
        self.default_tau = default_tau
        self.images: Dict[str, bytes] = {}
        self._lock = threading.Lock()

    def store_image(self, data: bytes) -> str:
        image_id = hashlib.sha256(data).hexdigest()[:16]
        with self._lock:
            self.images[image_id] = data
        return image_id

    def get_image(self, image_id: str) -> Optional[bytes]:
        with self._lock:
            return self.images.get(image_id)

    def model_info(self) -> dict:
        cfg = self.model.cfg
        return {"name": "tmdet", "version": __version__,
                "variant": cfg.match_variant.value,
                "decode_variant": cfg.decode_variant.value,
                "feature_depth": cfg.feature_depth,
                "params": self.model.param_count(),
                "supported_variants": sorted(self.views)}

    def detect(self, payload: dict) -> dict:
        if not isinstance(payload, dict):
            raise RequestError("request body must be a JSON object")
        exemplars = parse_exemplars(payload.get("exemplars"))
        if "image_id" in payload:
            data = self.get_image(str(payload["image_id"]))
            if data is None:
                raise RequestError(f"unknown image id {payload['image_id']!r}",
                                   status=404)
        elif "image_b64" in payload:
            try:
                data = base64.b64decode(payload["image_b64"], validate=True)
            except Exception as exc:
                raise RequestError(f"bad base64 image: {exc}") from exc
            if len(data) > MAX_UPLOAD_BYTES:
                raise RequestError("image too large", status=413)
        else:
            raise RequestError("request needs image_id or image_b64")
        image = decode_png(data)
        tau = payload.get("tau", self.default_tau)
        return run_detection(self.views, image, exemplars,
                             tau=float(tau) if tau is not None else None,
                             scales=payload.get("scales"),
                             variant=payload.get("variant"),
                             aggregate=bool(payload.get("aggregate", True)))


def _make_handler(service: DetectionService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, status: int, body: bytes,
                  content_type: str = "application/json") -> None:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, status: int, doc: dict) -> None:
            self._send(status, json.dumps(doc, sort_keys=True).encode("utf-8"))

        def _read_body(self) -> bytes:
            length = int(self.headers.get("Content-Length", 0))
            if length > MAX_UPLOAD_BYTES:
                # drain so the client can finish sending and see the 413
                remaining = length
                while remaining > 0:
                    chunk = self.rfile.read(min(remaining, 1 << 20))
                    if not chunk:
                        break
                    remaining -= len(chunk)
                raise RequestError("request body too large", status=413)
            return self.rfile.read(length)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            if self.path == "/healthz":
                self._send(200, b"ok", "text/plain")
            elif self.path == "/model":
                self._send_json(200, service.model_info())
            elif self.path.startswith("/images/"):
                data = service.get_image(self.path[len("/images/"):])
                if data is None:
                    self._send_json(404, {"error": "no such image"})
                else:
                    self._send(200, data, "image/png")
            else:
                self._send_json(404, {"error": f"no route {self.path}"})

        def do_POST(self):
            try:
                if self.path == "/detect":
                    try:
                        payload = json.loads(self._read_body().decode("utf-8"))
                    except RequestError:
                        raise
                    except Exception as exc:
                        raise RequestError(f"bad JSON body: {exc}") from exc
                    self._send_json(200, service.detect(payload))
                elif self.path == "/images":
                    data = self._read_body()
                    if not data:
                        raise RequestError("empty upload")
                    decode_png(data)  # reject non-images outright
                    self._send_json(200, {"id": service.store_image(data)})
                else:
                    self._send_json(404, {"error": f"no route {self.path}"})
            except RequestError as exc:
                self._send_json(exc.status, {"error": str(exc)})
            except Exception as exc:  # internal error: keep the server alive
                self._send_json(500, {"error": f"internal error: {exc}"})

    return Handler


def serve(model: Model, host: str = "127.0.0.1", port: int = 8765,
          default_tau: float = DEFAULT_TAU) -> ThreadingHTTPServer:
    """Build the HTTP server (caller decides between serve_forever and a
    background thread)."""
    service = DetectionService(model, default_tau=default_tau)
    server = ThreadingHTTPServer((host, port), _make_handler(service))
    server.service = service
    return server
