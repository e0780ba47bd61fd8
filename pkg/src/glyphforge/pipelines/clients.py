"""External-service clients (MLLM, layout LLM, OCR, inpainter, text-to-image, scorer).

Each client is a small request/response interface with a deterministic stub.
Remote variants speak JSON over HTTP with a per-call timeout and bounded
retries, both configurable through the environment or the config file.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from ..encoders import StubMLLM
from ..errors import ConfigurationError, ProtocolError, TransportError
from ..evaluation import EmptyOCR, NoisyOCR, OCRLine, OracleOCR
from ..layout import BBox, StubLayoutLLM

ENV_TIMEOUT = "GLYPHFORGE_CLIENT_TIMEOUT"
ENV_RETRIES = "GLYPHFORGE_CLIENT_RETRIES"
ENV_MAX_INFLIGHT = "GLYPHFORGE_CLIENT_MAX_INFLIGHT"


@dataclass
class TransportConfig:
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.5
    max_inflight: int = 4

    @classmethod
    def from_env(cls, **overrides) -> "TransportConfig":
        cfg = cls(
            timeout_s=float(os.environ.get(ENV_TIMEOUT, cls.timeout_s)),
            retries=int(os.environ.get(ENV_RETRIES, cls.retries)),
            max_inflight=int(os.environ.get(ENV_MAX_INFLIGHT, cls.max_inflight)),
        )
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return cfg


class JSONTransport:
    """POSTs JSON, retries on connection errors, timeouts and 5xx responses."""

    def __init__(self, url: str, cfg: TransportConfig | None = None,
                 opener: Callable[..., Any] = urllib.request.urlopen, sleep: Callable[[float], None] = time.sleep):
        self.url = url
        self.cfg = cfg or TransportConfig.from_env()
        self._opener = opener
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(self.cfg.max_inflight)

    def post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        last: Exception | None = None
        attempts = 0
        for attempt in range(self.cfg.retries + 1):
            attempts = attempt + 1
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with self._slots:
                    with self._opener(req, timeout=self.cfg.timeout_s) as resp:
                        raw = resp.read()
            except urllib.error.HTTPError as e:
                if e.code < 500:
                    raise TransportError(f"{self.url} rejected the request: HTTP {e.code}", attempts, retryable=False) from e
                last = e
            except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as e:
                last = e
            else:
                try:
                    return json.loads(raw)
                except json.JSONDecodeError as e:
                    raise ProtocolError(f"{self.url} returned invalid JSON", raw=raw[:200].decode("utf-8", "replace")) from e
            if attempt < self.cfg.retries:
                self._sleep(self.cfg.backoff_s * 2**attempt)
        raise TransportError(f"{self.url} failed after {attempts} attempts: {last}", attempts, retryable=True)


def encode_image(image: np.ndarray) -> str:
    """Float image in [0, 1] -> base64 PNG."""
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image(data: str) -> np.ndarray:
    from PIL import Image

    img = Image.open(io.BytesIO(base64.b64decode(data)))
    return np.asarray(img, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# remote clients


class RemoteMLLM:
    """Request {image, prompt}; response {"hidden_states": [[...], ...]} (last layer)."""

    def __init__(self, url: str, hidden_dim: int, transport: JSONTransport | None = None):
        self.hidden_dim = hidden_dim
        self.transport = transport or JSONTransport(url)

    def hidden_states(self, image, prompt):
        resp = self.transport.post({"image": encode_image(image), "prompt": prompt})
        hs = resp.get("hidden_states")
        if hs is None:
            raise ProtocolError("MLLM response lacks 'hidden_states'", raw=json.dumps(resp)[:200])
        arr = np.asarray(hs, dtype=np.float64).reshape(-1, self.hidden_dim) if len(hs) else np.zeros((0, self.hidden_dim))
        return arr


class RemoteTextLLM:
    """Request {prompt}; response {"text": "..."}; used by the MLLM layout planner."""

    def __init__(self, url: str, transport: JSONTransport | None = None):
        self.transport = transport or JSONTransport(url)

    def complete(self, prompt: str) -> str:
        resp = self.transport.post({"prompt": prompt})
        if not isinstance(resp.get("text"), str):
            raise ProtocolError("completion response lacks 'text'", raw=json.dumps(resp)[:200])
        return resp["text"]


class RemoteOCR:
    """Request {image}; response {"lines": [{"text": ..., "bbox": [l, t, r, b]}, ...]}."""

    def __init__(self, url: str, transport: JSONTransport | None = None):
        self.transport = transport or JSONTransport(url)

    def read(self, image, case=None) -> list[OCRLine]:
        resp = self.transport.post({"image": encode_image(image)})
        try:
            return [OCRLine.from_dict(d) for d in resp["lines"]]
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed OCR response: {e}", raw=json.dumps(resp)[:200]) from e


# ---------------------------------------------------------------------------
# inpainter / text-to-image / scorer


class Inpainter(Protocol):
    def inpaint(self, image: np.ndarray, region: BBox) -> np.ndarray: ...


class MedianInpainter:
    """Fills the region with the per-channel median of the pixels just outside it."""

    def __init__(self, ring: int = 2):
        self.ring = ring

    def inpaint(self, image, region: BBox):
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        if not region.within_canvas(w, h):
            raise ValueError("inpaint region lies outside the image")
        r = self.ring
        l, t, rr, b = max(region.left - r, 0), max(region.top - r, 0), min(region.right + r, w), min(region.bottom + r, h)
        mask = np.zeros((h, w), dtype=bool)
        mask[t:b, l:rr] = True
        mask[region.top:region.bottom, region.left:region.right] = False
        ring = img[mask] if mask.any() else img.reshape(-1, img.shape[-1])
        out = img.copy()
        out[region.top:region.bottom, region.left:region.right] = np.median(ring, axis=0)
        return out


class TextToImage(Protocol):
    def generate(self, prompt: str, size: tuple[int, int], seed: int) -> np.ndarray: ...


class GradientT2I:
    """Seeded two-colour linear gradient; the prompt is mixed into the seed."""

    def generate(self, prompt: str, size: tuple[int, int], seed: int) -> np.ndarray:
        w, h = size
        digest = hashlib.sha256(f"{seed}:{prompt}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        c0, c1 = rng.uniform(0.35, 1.0, size=(2, 3))
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        proj = np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1)
        proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
        return (1 - proj)[..., None] * c0 + proj[..., None] * c1


class RemoteInpainter:
    """Request {image, region: [l, t, r, b]}; response {"image": base64 PNG of the same size}.

    Only the region is taken from the response, so pixels outside it stay untouched.
    """

    def __init__(self, url: str, transport: JSONTransport | None = None):
        self.transport = transport or JSONTransport(url)

    def inpaint(self, image, region: BBox):
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        if not region.within_canvas(w, h):
            raise ValueError("inpaint region lies outside the image")
        resp = self.transport.post({"image": encode_image(img), "region": region.as_list()})
        filled = _response_image(resp, (h, w))
        out = img.copy()
        out[region.top:region.bottom, region.left:region.right] = filled[region.top:region.bottom, region.left:region.right]
        return out


class RemoteT2I:
    """Request {prompt, size: [w, h], seed}; response {"image": base64 PNG of that size}."""

    def __init__(self, url: str, transport: JSONTransport | None = None):
        self.transport = transport or JSONTransport(url)

    def generate(self, prompt: str, size: tuple[int, int], seed: int) -> np.ndarray:
        w, h = size
        resp = self.transport.post({"prompt": prompt, "size": [w, h], "seed": seed})
        return _response_image(resp, (h, w))


def _response_image(resp: dict, hw: tuple[int, int]) -> np.ndarray:
    data = resp.get("image")
    if not isinstance(data, str):
        raise ProtocolError("image response lacks 'image'", raw=json.dumps(resp)[:200])
    try:
        img = decode_image(data)
    except Exception as e:
        raise ProtocolError(f"undecodable image: {e}", raw=data[:200]) from e
    if img.ndim != 3 or img.shape[:2] != hw or img.shape[2] < 3:
        raise ProtocolError(f"image has shape {img.shape}, expected {hw} with RGB channels")
    return img[..., :3]


class FailingClient:
    """Raises TransportError on every call; used to exercise error attribution."""

    def __init__(self, hidden_dim: int = 64):
        self.hidden_dim = hidden_dim

    def _fail(self, *a, **k):
        raise TransportError("service unavailable", attempts=1)

    generate = inpaint = complete = read = hidden_states = plan = _fail


# ---------------------------------------------------------------------------
# call recording


@dataclass
class CallRecord:
    client: str
    method: str
    latency_s: float
    ok: bool
    error: str | None = None

    def to_dict(self) -> dict:
        return {"client": self.client, "method": self.method, "latency_s": self.latency_s, "ok": self.ok,
                "error": self.error}


@dataclass
class CallRecorder:
    records: list[CallRecord] = field(default_factory=list)
    clock: Callable[[], float] = time.perf_counter

    def wrap(self, name: str, client: Any) -> "RecordedClient":
        return RecordedClient(name, client, self)


class RecordedClient:
    """Proxy that times every method call and logs it to a CallRecorder."""

    def __init__(self, name: str, inner: Any, recorder: CallRecorder):
        self._name = name
        self._inner = inner
        self._recorder = recorder

    def __getattr__(self, attr):
        target = getattr(self._inner, attr)
        if not callable(target):
            return target

        def call(*args, **kwargs):
            start = self._recorder.clock()
            try:
                out = target(*args, **kwargs)
            except Exception as e:
                self._recorder.records.append(CallRecord(self._name, attr, self._recorder.clock() - start, False, str(e)))
                raise
            self._recorder.records.append(CallRecord(self._name, attr, self._recorder.clock() - start, True))
            return out

        return call


# ---------------------------------------------------------------------------
# selection by config


def make_mllm(spec: str, hidden_dim: int):
    if spec == "stub":
        return StubMLLM(hidden_dim)
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteMLLM(spec, hidden_dim)
    raise ConfigurationError(f"unknown MLLM client {spec!r}; use 'stub' or a URL")


def make_layout_llm(spec: str):
    if spec == "stub":
        return StubLayoutLLM()
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteTextLLM(spec)
    raise ConfigurationError(f"unknown layout client {spec!r}; use 'stub' or a URL")


def make_ocr(spec: str, seed: int = 0):
    stubs = {"oracle": OracleOCR, "empty": EmptyOCR, "stub": OracleOCR}
    if spec in stubs:
        return stubs[spec]()
    if spec == "noisy":
        return NoisyOCR(seed=seed)
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteOCR(spec)
    raise ConfigurationError(f"unknown OCR client {spec!r}; use oracle, empty, noisy, stub or a URL")


def make_inpainter(spec: str):
    if spec == "median":
        return MedianInpainter()
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteInpainter(spec)
    raise ConfigurationError(f"unknown inpainter {spec!r}; use 'median' or a URL")


def make_t2i(spec: str):
    if spec == "stub":
        return GradientT2I()
    if spec.startswith("http://") or spec.startswith("https://"):
        return RemoteT2I(spec)
    raise ConfigurationError(f"unknown text-to-image client {spec!r}; use 'stub' or a URL")
