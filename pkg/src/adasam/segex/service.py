"""HTTP service for blinded rating sessions.

Serves the per-observer item queue, renders items (overlay for image-enabled
observers, mask-only otherwise), accepts rating submissions, and exposes the
aggregate report only when the operator launched it with the sealed key.
Submissions from distinct observers may arrive concurrently; writes serialize
through one lock.
"""

from __future__ import annotations

import io
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from ..phantom import LABEL_VL, LABEL_VM, load_image, load_mask
from .session import ObserverRating, SegExSession, aggregate, observer_payload, record_rating

MUSCLE_COLORS = {LABEL_VL: (235, 140, 80), LABEL_VM: (90, 150, 235)}
OVERLAY_ALPHA = 0.55


def render_item(session: SegExSession, item_index: int, view: str) -> bytes:
    """PNG bytes for one item: `mask` on black, `image` alone, or `overlay`."""
    item = session.item_index(item_index)
    mask = load_mask(session.root / item.mask)
    h, w = mask.shape
    if view == "image" or view == "overlay":
        image_path = session.root / "images" / f"{item.slice}.png"
        if not image_path.exists():
            raise FileNotFoundError(f"session holds no image for slice {item.slice}")
        gray = load_image(image_path)
        rgb = np.repeat((gray * 255.0).astype(np.uint8)[:, :, None], 3, axis=2).astype(np.float64)
    else:
        rgb = np.zeros((h, w, 3), dtype=np.float64)
    if view in ("mask", "overlay"):
        alpha = OVERLAY_ALPHA if view == "overlay" else 1.0
        for label, color in MUSCLE_COLORS.items():
            where = mask == label
            for channel in range(3):
                rgb[..., channel][where] = (
                    (1 - alpha) * rgb[..., channel][where] + alpha * color[channel]
                )
    buffer = io.BytesIO()
    Image.fromarray(rgb.round().astype(np.uint8), mode="RGB").save(buffer, format="PNG")
    return buffer.getvalue()


class SegexService:
    """Session state shared by request handler threads."""

    def __init__(self, session: SegExSession, key_path: Path | None = None,
                 ui_dir: Path | None = None):
        self.session = session
        self.key_path = key_path
        self.ui_dir = ui_dir
        self.write_lock = threading.Lock()

    def submit(self, body: dict) -> dict:
        observer = self.session.authenticate(body["observer"], body.get("token", ""))
        rating = ObserverRating(
            observer=observer.id,
            item=body["item"],
            scores={str(k): int(v) for k, v in body["scores"].items()},
        )
        with self.write_lock:
            record_rating(self.session, rating)
        return {"ok": True, "item": rating.item}

    def report(self) -> dict:
        if self.key_path is None or not Path(self.key_path).exists():
            raise PermissionError("report requires the sealed key file")
        return aggregate(self.session, self.key_path)


class SegexRequestHandler(BaseHTTPRequestHandler):
    service: SegexService  # injected by make_server

    # route patterns
    RE_SESSION = re.compile(r"^/api/session/([0-9a-f]+)$")
    RE_RENDER = re.compile(r"^/api/session/([0-9a-f]+)/item/(\d+)/render$")
    RE_RATING = re.compile(r"^/api/session/([0-9a-f]+)/rating$")
    RE_REPORT = re.compile(r"^/api/session/([0-9a-f]+)/report$")

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _cors(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send_json(self, status: int, payload: dict):
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)

    def _send_png(self, data: bytes):
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self._cors()
        self.end_headers()
        self.wfile.write(data)

    def _session_or_404(self, session_id: str) -> bool:
        if session_id != self.service.session.session_id:
            self._send_json(404, {"error": "unknown session"})
            return False
        return True

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors()
        self.end_headers()

    def do_GET(self):
        url = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        session = self.service.session

        match = self.RE_SESSION.match(url.path)
        if match:
            if not self._session_or_404(match.group(1)):
                return
            try:
                session.authenticate(query.get("observer", ""), query.get("token", ""))
            except (KeyError, PermissionError):
                self._send_json(403, {"error": "invalid observer or token"})
                return
            self._send_json(200, observer_payload(session, query["observer"]))
            return

        match = self.RE_RENDER.match(url.path)
        if match:
            if not self._session_or_404(match.group(1)):
                return
            try:
                spec = session.authenticate(query.get("observer", ""), query.get("token", ""))
            except (KeyError, PermissionError):
                self._send_json(403, {"error": "invalid observer or token"})
                return
            view = query.get("view", "overlay" if spec.include_image else "mask")
            if not spec.include_image and view != "mask":
                self._send_json(403, {"error": "this observer rates masks only"})
                return
            if view not in ("overlay", "image", "mask"):
                self._send_json(400, {"error": f"unknown view {view!r}"})
                return
            try:
                png = render_item(session, int(match.group(2)), view)
            except (IndexError, FileNotFoundError) as exc:
                self._send_json(404, {"error": str(exc)})
                return
            self._send_png(png)
            return

        match = self.RE_REPORT.match(url.path)
        if match:
            if not self._session_or_404(match.group(1)):
                return
            try:
                self._send_json(200, self.service.report())
            except PermissionError as exc:
                self._send_json(403, {"error": str(exc)})
            except ValueError as exc:
                self._send_json(409, {"error": str(exc)})
            return

        if self.service.ui_dir is not None:
            self._serve_static(url.path)
            return
        self._send_json(404, {"error": "not found"})

    def _serve_static(self, path: str):
        rel = path.lstrip("/") or "index.html"
        target = (self.service.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.service.ui_dir.resolve())) or not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        content_types = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".png": "image/png",
        }
        body = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", content_types.get(target.suffix, "application/octet-stream"))
        self.send_header("Content-Length", str(len(body)))
        self._cors()
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        url = urlparse(self.path)
        match = self.RE_RATING.match(url.path)
        if not match:
            self._send_json(404, {"error": "not found"})
            return
        if not self._session_or_404(match.group(1)):
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length).decode())
        except json.JSONDecodeError:
            self._send_json(400, {"error": "body is not valid JSON"})
            return
        try:
            result = self.service.submit(body)
        except PermissionError as exc:
            self._send_json(403, {"error": str(exc)})
            return
        except (KeyError, ValueError) as exc:
            self._send_json(400, {"error": str(exc)})
            return
        self._send_json(200, result)


def make_server(
    session: SegExSession,
    port: int = 0,
    host: str = "127.0.0.1",
    key_path: Path | str | None = None,
    ui_dir: Path | str | None = None,
) -> ThreadingHTTPServer:
    """Build (without starting) the rating server; port 0 picks a free port."""
    service = SegexService(
        session,
        key_path=Path(key_path) if key_path else None,
        ui_dir=Path(ui_dir) if ui_dir else None,
    )
    handler = type("BoundHandler", (SegexRequestHandler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)
