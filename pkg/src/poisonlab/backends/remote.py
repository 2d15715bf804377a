"""Client for a remote inpainting/generation service.

Wire protocol: JSON request
``{prompt, strength, image_png_base64, mask_png_base64?, style_png_base64?, seed}``
answered with ``{image_png_base64}``. Transient failures (HTTP 5xx,
connection errors) are retried with exponential backoff; malformed
payloads are not retried.
"""

from __future__ import annotations

import base64
import io
import time

import numpy as np
import requests
from PIL import Image as PILImage

from ..core import Image, Mask
from .base import BackendError, EditRequest


class TransportError(BackendError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class DecodeError(BackendError):
    """Response payload could not be decoded into an image."""


class UnavailableError(BackendError):
    """All retries were exhausted."""


def _png_b64(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[pixels.shape[2]]
    arr = pixels[:, :, 0] if mode == "L" else pixels
    PILImage.fromarray(arr, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_png_b64(payload: str) -> Image:
    try:
        raw = base64.b64decode(payload)
        with PILImage.open(io.BytesIO(raw)) as pil:
            pil = pil.convert("RGB")
            px = np.asarray(pil)
    except Exception as e:
        raise DecodeError(f"response is not a decodable PNG: {e}") from e
    return Image(px, id="remote")


class RemoteBackend:
    """Drives a diffusion service over HTTP with idempotent retries."""

    kind = "remote"

    def __init__(self, endpoint: str, auth_token: str = "", *,
                 max_retries: int = 3, backoff_s: float = 0.5,
                 timeout_s: float = 30.0, session: requests.Session | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.auth_token = auth_token
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self.last_attempts = 0

    def _post(self, path: str, payload: dict) -> Image:
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        attempts = 0
        last_err: Exception | None = None
        while attempts <= self.max_retries:
            attempts += 1
            try:
                resp = self.session.post(self.endpoint + path, json=payload,
                                         headers=headers, timeout=self.timeout_s)
            except requests.ConnectionError as e:
                last_err = TransportError(f"connection failed: {e}")
                self._sleep(attempts)
                continue
            if 500 <= resp.status_code < 600:
                last_err = TransportError(f"server error {resp.status_code}",
                                          status=resp.status_code)
                self._sleep(attempts)
                continue
            if resp.status_code != 200:
                self.last_attempts = attempts
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}",
                                     status=resp.status_code)
            try:
                body = resp.json()
                b64 = body["image_png_base64"]
            except Exception as e:
                self.last_attempts = attempts
                raise DecodeError(f"malformed response body: {e}") from e
            self.last_attempts = attempts
            return _decode_png_b64(b64)
        self.last_attempts = attempts
        raise UnavailableError(
            f"{self.max_retries} retries exhausted for {path}: {last_err}")

    def _sleep(self, attempt: int) -> None:
        if attempt <= self.max_retries:
            time.sleep(self.backoff_s * (2 ** (attempt - 1)))

    def _payload(self, req: EditRequest) -> dict:
        payload = {
            "prompt": req.prompt,
            "strength": req.noise_strength,
            "image_png_base64": _png_b64(req.image.pixels),
            "seed": req.rng.seed,
        }
        if req.mask is not None:
            mask_px = np.where(req.mask.bits, 255, 0).astype(np.uint8)[:, :, None]
            payload["mask_png_base64"] = _png_b64(mask_px)
        if req.style_ref is not None:
            payload["style_png_base64"] = _png_b64(req.style_ref.pixels)
        return payload

    def remote_generate(self, req: EditRequest) -> Image:
        return self._post("/generate", self._payload(req))

    def remote_inpaint(self, req: EditRequest) -> Image:
        if req.mask is None or req.mask.empty:
            raise BackendError("remote_inpaint requires a non-empty mask")
        return self._post("/inpaint", self._payload(req))
